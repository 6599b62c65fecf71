import json
import logging
import math
import os
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from app.projective.core.errors import ArgumentError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "config.json")


# ---------------------------
# Configurazione numerica
# ---------------------------

class VerificationConfig(BaseModel):
    """
    Parametri numerici condivisi da tutti i moduli (passi, tolleranze, griglie, seed).

    Ogni operazione pubblica accetta il proprio passo/tolleranza come argomento opzionale
    e ricade su questi valori quando l'argomento è omesso.
    """
    h: float = Field(1e-5, gt=0, description="Passo delle differenze centrali al primo ordine")
    h_gamma: float = Field(1e-4, gt=0, description="Passo per le derivate dei simboli di Christoffel (curvatura)")
    h_structure: float = Field(1e-3, gt=0, description="Passo esterno per d(theta) e per la forma chiusa di W")
    dt: float = Field(1e-3, gt=0, description="Passo temporale RK4")
    steps: int = Field(10000, gt=0, description="Numero di passi RK4")
    grid: int = Field(41, ge=3, description="Lato della griglia di campionamento")
    interior_grid: int = Field(21, ge=3, description="Lato della griglia interna per i confronti di W")
    seed: int = Field(42, ge=0, description="Seed del generatore PCG64")
    tol: float = Field(1e-5, gt=0, description="Tolleranza di equivalenza proiettiva (sup-norm)")
    geodesic_tol: float = Field(1e-3, gt=0, description="Tolleranza sulla distanza tra tracce")
    planarity_tol: float = Field(1e-6, gt=0, description="Soglia del difetto di planarità")
    det_floor: float = Field(1e-12, gt=0, description="Soglia minima del determinante della metrica")
    density_floor: float = Field(1e-10, gt=0, description="Soglia minima della densità di eta1^eta2")
    cap_epsilon: float = Field(1e-3, gt=0, description="Raggio angolare delle calotte polari escluse")
    sphere_resolution: Tuple[int, int] = Field((400, 200), description="Risoluzione (longitudine, latitudine) della mesh sferica")
    torus_resolution: int = Field(64, ge=2, description="Nodi per lato della mesh del toro")
    hodge_sign: int = Field(1, description="Segno globale della stella di Hodge (+1 o -1)")
    switch_radius: float = Field(2.0, gt=0, description="Raggio oltre il quale si cambia carta sulla sfera")
    max_chart_step: float = Field(0.5, gt=0, description="Spostamento massimo di carta per passo RK4 prima di fermare un cammino")
    beltrami_samples: int = Field(20, gt=0, description="Numero di psi casuali nella suite beltrami")
    beltrami_geodesics: int = Field(50, gt=0, description="Geodetiche per ogni psi")
    beltrami_steps: int = Field(2000, gt=0, description="Passi RK4 per le geodetiche di Beltrami")
    beltrami_dt: float = Field(2e-3, gt=0, description="Passo RK4 per le geodetiche di Beltrami")
    shift_samples: int = Field(50, gt=0, description="Numero di traslazioni iota(alpha) casuali")
    shift_geodesics: int = Field(4, gt=0, description="Condizioni iniziali per ogni traslazione")
    shift_steps: int = Field(1500, gt=0, description="Passi RK4 nel confronto delle tracce")
    shift_dt: float = Field(2e-3, gt=0, description="Passo RK4 nel confronto delle tracce")
    shift_max_step: float = Field(0.02, gt=0, description="Spostamento massimo per passo nel confronto delle tracce")
    structure_corpora: int = Field(5, gt=0, description="Numero di coppie (g, beta) casuali nella suite structure")
    rank_samples: int = Field(10, gt=0, description="Punti base casuali per family_rank")
    family_fd_step: float = Field(1e-5, gt=0, description="Passo FD lungo sl(3)")
    max_condition: float = Field(5.0, gt=1, description="Numero di condizionamento massimo di psi casuale")

    @field_validator("hodge_sign")
    def check_sign(cls, value):
        if value not in (1, -1):
            raise ValueError("hodge_sign deve essere +1 o -1")
        return value


def load_projective_config(config_path: str = None) -> VerificationConfig:
    """
    Carica la configurazione numerica da un file JSON.

    Args:
        config_path (str): Percorso del file; se omesso si usa il config.json accanto al modulo.

    Returns:
        VerificationConfig: La configurazione validata.
    """
    config_path = config_path or DEFAULT_CONFIG_PATH
    with open(config_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return VerificationConfig(**data)


projective_config = load_projective_config()


def _apply_values(values: dict) -> None:
    for name, value in values.items():
        setattr(projective_config, name, value)


@contextmanager
def active_config(config: VerificationConfig) -> Iterator[VerificationConfig]:
    """
    Rende `config` la sorgente dei valori predefiniti della libreria per la durata del blocco.

    Le funzioni che ricevono passo, soglie o griglie come argomenti opzionali li leggono da
    `projective_config`: dentro il blocco quell'istanza riporta i valori di `config`, all'uscita
    torna ai valori precedenti.

    Args:
        config (VerificationConfig): Configurazione attiva.

    Yields:
        VerificationConfig: l'istanza condivisa con i valori di `config`.
    """
    saved = projective_config.model_dump()
    _apply_values(config.model_dump())
    logger.debug("Configurazione attiva: seed %d, h %.1e", config.seed, config.h)
    try:
        yield projective_config
    finally:
        _apply_values(saved)


# ---------------------------
# Generatore casuale
# ---------------------------

def make_rng(seed: Optional[int] = None) -> np.random.Generator:
    """Generatore PCG64 a 64 bit; ogni suite ne crea uno nuovo dal seed."""
    if seed is None:
        seed = projective_config.seed
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------
# Helper numerici
# ---------------------------

def sup_norm(values) -> float:
    """Massimo valore assoluto; NaN viene propagato come inf."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return 0.0
    if not np.all(np.isfinite(arr)):
        return math.inf
    return float(np.max(np.abs(arr)))


def richardson(derivative: Callable[[float], np.ndarray], h: float) -> np.ndarray:
    """
    Estrapolazione di Richardson di una derivativa centrale O(h^2).

    Args:
        derivative: funzione h -> stima della derivata con passo h.
        h (float): passo grossolano.

    Returns:
        La stima O(h^4): (4 D(h/2) - D(h)) / 3.
    """
    coarse = np.asarray(derivative(h), dtype=float)
    fine = np.asarray(derivative(h / 2.0), dtype=float)
    return (4.0 * fine - coarse) / 3.0


def observed_orders(errors: Sequence[float], refinement: float = 2.0) -> List[float]:
    """Ordini osservati tra raffinamenti successivi: log(e_k / e_{k+1}) / log(refinement)."""
    errors = [float(e) for e in errors]
    if len(errors) < 2:
        raise ArgumentError("Servono almeno due errori per stimare un ordine di convergenza")
    orders = []
    for coarse, fine in zip(errors[:-1], errors[1:]):
        if coarse <= 0.0 or fine <= 0.0:
            orders.append(math.inf)
        else:
            orders.append(math.log(coarse / fine) / math.log(refinement))
    return orders


def observed_order(errors: Sequence[float], refinement: float = 2.0) -> float:
    """Ordine osservato peggiore sulla sequenza di raffinamenti."""
    order = min(observed_orders(errors, refinement))
    logger.debug("errori %s -> ordine osservato %.3f", list(errors), order)
    return order
