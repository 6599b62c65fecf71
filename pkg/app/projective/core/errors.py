# errors.py

# ---------------------------
# Gerarchia delle eccezioni
# ---------------------------
#
# Ogni errore porta un messaggio leggibile (detail) e il codice di uscita che la CLI
# restituisce quando l'errore risale fino al comando.


class GeometryError(Exception):
    """
    Errore base della libreria.

    Attributes:
        detail (str): Messaggio leggibile.
        exit_code (int): Codice di uscita usato dalla CLI.
    """
    exit_code: int = 2

    def __init__(self, detail: str, exit_code: int = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class DomainError(GeometryError):
    """Punto fuori dal dominio della carta (o carta non registrata)."""


class SingularMetricError(GeometryError):
    """Metrica degenere o non definita positiva in un punto campionato."""


class InvalidElementError(GeometryError):
    """Elemento di gruppo non valido (det a <= 0, det psi <= 0)."""


class IntegrationError(GeometryError):
    """NaN o valori non finiti durante l'integrazione delle geodetiche."""


class ArgumentError(GeometryError):
    """Argomento non valido (mesh vuota, forme incompatibili, modello sconosciuto)."""


class ComparisonError(GeometryError):
    """Cammini non confrontabili (carte diverse e nessun embedding)."""


class UsageError(GeometryError):
    exit_code = 2


class ReportIOError(GeometryError):
    exit_code = 3
