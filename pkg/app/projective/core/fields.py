import csv
import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.projective.core.errors import ArgumentError, DomainError, ReportIOError, SingularMetricError
from app.projective.core.utilities import projective_config

logger = logging.getLogger(__name__)

# Matrice di rotazione di 90 gradi: (a1, a2) @ EPSILON = (-a2, a1)
EPSILON = np.array([[0.0, 1.0], [-1.0, 0.0]])


# --------------------------- Carte ---------------------------

class Chart(BaseModel):
    """
    Carta locale con dominio rettangolare (eventualmente illimitato o periodico).

    Attributes:
        chart_id (str): Identificatore univoco della carta.
        u_range, v_range: Estremi del dominio nelle due coordinate.
        periodic: Coordinate periodiche (toro).
    """
    model_config = ConfigDict(frozen=True)

    chart_id: str = Field(..., description="Identificatore della carta")
    u_range: Tuple[float, float] = Field((-math.inf, math.inf), description="Dominio in u")
    v_range: Tuple[float, float] = Field((-math.inf, math.inf), description="Dominio in v")
    periodic: Tuple[bool, bool] = Field((False, False), description="Periodicità in (u, v)")

    def contains(self, u, v, margin: float = 0.0) -> np.ndarray:
        """True dove (u, v) dista almeno `margin` dal bordo (le direzioni periodiche non hanno bordo)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        inside = np.isfinite(u) & np.isfinite(v)
        if not self.periodic[0]:
            inside &= (u - margin >= self.u_range[0]) & (u + margin <= self.u_range[1])
        if not self.periodic[1]:
            inside &= (v - margin >= self.v_range[0]) & (v + margin <= self.v_range[1])
        return inside


CHART_REGISTRY: Dict[str, Chart] = {}


def register_chart(chart: Chart) -> Chart:
    CHART_REGISTRY[chart.chart_id] = chart
    return chart


def get_chart(chart_id: str) -> Chart:
    try:
        return CHART_REGISTRY[chart_id]
    except KeyError:
        raise DomainError(f"Carta non registrata: {chart_id}")


register_chart(Chart(chart_id="plane"))
register_chart(Chart(chart_id="torus", u_range=(0.0, 1.0), v_range=(0.0, 1.0), periodic=(True, True)))
register_chart(Chart(chart_id="sphere_north", u_range=(-10.0, 10.0), v_range=(-10.0, 10.0)))
register_chart(Chart(chart_id="sphere_south", u_range=(-10.0, 10.0), v_range=(-10.0, 10.0)))


class ChartPoint(BaseModel):
    """Punto in coordinate locali (u, v) di una carta registrata."""
    model_config = ConfigDict(frozen=True)

    u: float = Field(..., description="Prima coordinata")
    v: float = Field(..., description="Seconda coordinata")
    chart_id: str = Field("plane", description="Carta di appartenenza")

    @field_validator("u", "v")
    def check_finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("Le coordinate devono essere finite")
        return value

    @model_validator(mode="after")
    def check_chart(self):
        get_chart(self.chart_id)
        return self


# --------------------------- Campi ---------------------------

def _assemble(raw, shape: Tuple[int, ...], leaf: bool = False) -> np.ndarray:
    # Tuple/liste annidate di componenti (anche costanti) diventano assi finali.
    if isinstance(raw, (tuple, list)):
        parts = [_assemble(item, shape, leaf=True) for item in raw]
        return np.stack(parts, axis=len(shape))
    arr = np.asarray(raw, dtype=float)
    if leaf and arr.shape[:len(shape)] != shape:
        arr = np.broadcast_to(arr, shape + arr.shape[len(shape):] if arr.ndim > len(shape) else shape)
    return arr


class SampledField:
    """
    Campo definito da un campionatore vettoriale `sampler(u, v)`.

    Il campionatore riceve array numpy (u, v) di forma qualsiasi e restituisce un array di
    forma `u.shape + value_shape`, oppure una tupla di componenti che viene impilata sugli
    assi finali. I valori costanti vengono estesi per broadcasting.
    """
    value_shape: Tuple[int, ...] = ()
    kind: str = "field"

    def __init__(self, sampler: Callable, chart_id: str = "plane"):
        get_chart(chart_id)
        self.sampler = sampler
        self.chart_id = chart_id

    def __call__(self, u, v) -> np.ndarray:
        u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
        values = _assemble(self.sampler(u, v), u.shape)
        expected = u.shape + self.value_shape
        if values.shape != expected:
            try:
                values = np.broadcast_to(values, expected)
            except ValueError:
                raise ArgumentError(
                    f"Forma del campo {self.kind} non valida: attesa {expected}, ottenuta {values.shape}"
                )
        return values

    def at(self, point: ChartPoint) -> np.ndarray:
        if point.chart_id != self.chart_id:
            raise DomainError(f"Il punto appartiene alla carta {point.chart_id}, il campo a {self.chart_id}")
        return self(point.u, point.v)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(chart_id={self.chart_id!r})"


class ScalarField(SampledField):
    kind = "scalar"


class OneFormField(SampledField):
    """1-forma: componenti (omega_u, omega_v) sui differenziali du, dv."""
    value_shape = (2,)
    kind = "1-form"


class TwoFormField(SampledField):
    """2-forma: densità sul prodotto du^dv."""
    kind = "2-form"


class MetricField(SampledField):
    """Metrica simmetrica con componenti (g11, g12, g22)."""
    value_shape = (3,)
    kind = "metric"

    def matrix(self, u, v) -> np.ndarray:
        return metric_matrix(self(u, v))


class CoframeField(SampledField):
    """
    Cocornice: matrice 2x2 le cui righe sono i coefficienti di (eta1, eta2) su (du, dv).

    Attributes:
        orientation (int): +1 se det e > 0 (cocornice orientata positivamente).
    """
    value_shape = (2, 2)
    kind = "coframe"

    def __init__(self, sampler: Callable, chart_id: str = "plane", orientation: int = 1):
        super().__init__(sampler, chart_id)
        self.orientation = orientation


class FormMatrix(SampledField):
    """
    Matrice n x n di 1-forme memorizzata come un unico campionatore (..., n, n, 2).

    Usata per la forma di connessione zeta (2x2) e per la connessione di Cartan theta (3x3).
    """
    kind = "form-matrix"

    def __init__(self, sampler: Callable, n: int, chart_id: str = "plane"):
        self.value_shape = (n, n, 2)
        self.n = n
        super().__init__(sampler, chart_id)

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence[OneFormField]], chart_id: Optional[str] = None) -> "FormMatrix":
        n = len(entries)
        if any(len(row) != n for row in entries):
            raise ArgumentError("La matrice di forme deve essere quadrata")
        chart_id = chart_id or entries[0][0].chart_id

        def sampler(u, v):
            rows = [np.stack([entry(u, v) for entry in row], axis=-2) for row in entries]
            return np.stack(rows, axis=-3)

        return cls(sampler, n, chart_id)

    def entry(self, i: int, j: int) -> OneFormField:
        return OneFormField(lambda u, v: self(u, v)[..., i, j, :], self.chart_id)

    def trace(self) -> OneFormField:
        return OneFormField(lambda u, v: np.einsum("...iic->...c", self(u, v)), self.chart_id)

    def exterior_derivative(self, h: Optional[float] = None) -> Callable:
        """Densità di d(theta) entrata per entrata: campionatore (..., n, n)."""
        h = h or projective_config.h

        def sampler(u, v):
            du, dv = central_partials(self, u, v, h)
            return du[..., 1] - dv[..., 0]

        return sampler

    def wedge_self(self, u, v) -> np.ndarray:
        """Densità di theta ^ theta: A_u A_v - A_v A_u."""
        values = self(u, v)
        a_u = values[..., 0]
        a_v = values[..., 1]
        return a_u @ a_v - a_v @ a_u


AtlasField = Dict[str, SampledField]


# --------------------------- Algebra pointwise ---------------------------

def metric_matrix(components: np.ndarray) -> np.ndarray:
    components = np.asarray(components, dtype=float)
    g11, g12, g22 = components[..., 0], components[..., 1], components[..., 2]
    return np.stack([np.stack([g11, g12], axis=-1), np.stack([g12, g22], axis=-1)], axis=-2)


def metric_components(matrix: np.ndarray) -> np.ndarray:
    return np.stack([matrix[..., 0, 0], matrix[..., 0, 1], matrix[..., 1, 1]], axis=-1)


def checked_inverse(G: np.ndarray, det_floor: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inversa 2x2 con controllo del determinante.

    Returns:
        (inversa, determinante)

    Raises:
        SingularMetricError: se det G è sotto la soglia in qualche campione.
    """
    if det_floor is None:
        det_floor = projective_config.det_floor
    det = G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]
    if not np.all(np.abs(det) > det_floor):
        raise SingularMetricError(f"Metrica degenere: |det| minimo {np.min(np.abs(det)):.3e} sotto la soglia {det_floor:.1e}")
    inverse = np.stack([
        np.stack([G[..., 1, 1], -G[..., 0, 1]], axis=-1),
        np.stack([-G[..., 1, 0], G[..., 0, 0]], axis=-1),
    ], axis=-2) / det[..., None, None]
    return inverse, det


def cholesky_coframe(G: np.ndarray, det_floor: Optional[float] = None) -> np.ndarray:
    """
    Radice triangolare inferiore e con e^T e = G (righe = eta1, eta2).

    e22 = sqrt(g22), e21 = g12 / sqrt(g22), e11 = sqrt(det G / g22).
    """
    if det_floor is None:
        det_floor = projective_config.det_floor
    g11, g12, g22 = G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]
    det = g11 * g22 - g12 * g12
    if not (np.all(g22 > 0.0) and np.all(det > det_floor)):
        raise SingularMetricError("Metrica non definita positiva in almeno un campione")
    e22 = np.sqrt(g22)
    e21 = g12 / e22
    e11 = np.sqrt(det / g22)
    zero = np.zeros_like(e11)
    return np.stack([np.stack([e11, zero], axis=-1), np.stack([e21, e22], axis=-1)], axis=-2)


def frame_components(omega: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Coefficienti a della 1-forma nella cocornice: omega = a e, quindi a = omega e^{-1}."""
    inverse, _ = checked_inverse(e, det_floor=0.0)
    return np.einsum("...a,...ai->...i", omega, inverse)


def from_frame(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...ia->...a", a, e)


def tensor_to_frame(T: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Componenti di frame T_ij = E^a_i T_ab E^b_j di un 2-tensore covariante, con E = e^{-1}."""
    inverse, _ = checked_inverse(e, det_floor=0.0)
    return np.einsum("...ai,...ab,...bj->...ij", inverse, T, inverse)


def central_partials(fn: Callable, u, v, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Derivate centrali (f(u+h) - f(u-h)) / 2h in u e v.

    I quattro punti spostati vengono valutati in un'unica chiamata vettoriale.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u, v = np.broadcast_arrays(u, v)
    U = np.stack([u + h, u - h, u, u])
    V = np.stack([v, v, v + h, v - h])
    values = fn(U, V)
    du = (values[0] - values[1]) / (2.0 * h)
    dv = (values[2] - values[3]) / (2.0 * h)
    return du, dv


def central_stencil(fn: Callable, u, v, h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Come central_partials, ma restituisce anche il valore al centro (cinque punti, una chiamata)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u, v = np.broadcast_arrays(u, v)
    U = np.stack([u, u + h, u - h, u, u])
    V = np.stack([v, v, v, v + h, v - h])
    values = fn(U, V)
    return values[0], (values[1] - values[2]) / (2.0 * h), (values[3] - values[4]) / (2.0 * h)


# --------------------------- Derivate puntuali ---------------------------

def _check_margin(field: SampledField, x: ChartPoint, h: float):
    if x.chart_id != field.chart_id:
        raise DomainError(f"Il punto appartiene alla carta {x.chart_id}, il campo a {field.chart_id}")
    chart = get_chart(x.chart_id)
    if not bool(chart.contains(x.u, x.v, margin=h)):
        raise DomainError(f"Punto ({x.u}, {x.v}) fuori dal dominio della carta {x.chart_id} con margine {h}")


def d_scalar(f: ScalarField, x: ChartPoint, h: Optional[float] = None) -> np.ndarray:
    """
    Differenziale di uno scalare in un punto.

    Args:
        f (ScalarField): Campo scalare.
        x (ChartPoint): Punto interno con margine almeno h.
        h (float): Passo; default dalla configurazione.

    Returns:
        np.ndarray: (df/du, df/dv).
    """
    h = h or projective_config.h
    _check_margin(f, x, h)
    du, dv = central_partials(f, x.u, x.v, h)
    return np.array([float(du), float(dv)])


def d_oneform(omega: OneFormField, x: ChartPoint, h: Optional[float] = None) -> float:
    """Densità di d(omega) in un punto: d_u omega_v - d_v omega_u."""
    h = h or projective_config.h
    _check_margin(omega, x, h)
    du, dv = central_partials(omega, x.u, x.v, h)
    return float(du[..., 1] - dv[..., 0])


# --------------------------- Operatori su campi ---------------------------

def exterior_derivative(f: ScalarField, h: Optional[float] = None) -> OneFormField:
    h = h or projective_config.h

    def sampler(u, v):
        du, dv = central_partials(f, u, v, h)
        return np.stack([du, dv], axis=-1)

    return OneFormField(sampler, f.chart_id)


def exterior_derivative_oneform(omega: OneFormField, h: Optional[float] = None) -> TwoFormField:
    h = h or projective_config.h

    def sampler(u, v):
        du, dv = central_partials(omega, u, v, h)
        return du[..., 1] - dv[..., 0]

    return TwoFormField(sampler, omega.chart_id)


def wedge(alpha: OneFormField, beta: OneFormField) -> TwoFormField:
    def sampler(u, v):
        a = alpha(u, v)
        b = beta(u, v)
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    return TwoFormField(sampler, alpha.chart_id)


def orthonormal_coframe(g: MetricField) -> CoframeField:
    """
    Cocornice ortonormale deterministica (radice di Cholesky triangolare inferiore).

    Args:
        g (MetricField): Metrica definita positiva.

    Returns:
        CoframeField: righe eta1, eta2 con e^T e = g e det e > 0.
    """
    return CoframeField(lambda u, v: cholesky_coframe(g.matrix(u, v)), g.chart_id, orientation=1)


def _resolve_sign(orientation: Optional[int]) -> int:
    sign = projective_config.hodge_sign if orientation is None else orientation
    if sign not in (1, -1):
        raise ArgumentError("L'orientazione deve essere +1 o -1")
    return sign


def hodge_star(omega: OneFormField, g: MetricField, orientation: Optional[int] = None) -> OneFormField:
    """
    Stella di Hodge sulle 1-forme: in una cocornice ortonormale positiva *eta1 = eta2, *eta2 = -eta1.

    Con orientation = -1 il segno si inverte (interruttore di audit).
    """
    sign = _resolve_sign(orientation)

    def sampler(u, v):
        e = cholesky_coframe(g.matrix(u, v))
        a = frame_components(omega(u, v), e)
        return sign * from_frame(a @ EPSILON, e)

    return OneFormField(sampler, omega.chart_id)


def star_twoform(rho: TwoFormField, g: MetricField, orientation: Optional[int] = None) -> ScalarField:
    """*(rho du^dv) = rho / sqrt(det g), dato che *(eta1^eta2) = 1."""
    sign = _resolve_sign(orientation)

    def sampler(u, v):
        _, det = checked_inverse(g.matrix(u, v))
        return sign * rho(u, v) / np.sqrt(det)

    return ScalarField(sampler, rho.chart_id)


def codifferential(beta: OneFormField, g: MetricField, orientation: Optional[int] = None,
                   h: Optional[float] = None) -> ScalarField:
    """delta beta = - * d * beta."""
    star_beta = hodge_star(beta, g, orientation)
    star_d_star = star_twoform(exterior_derivative_oneform(star_beta, h), g, orientation)
    return ScalarField(lambda u, v: -star_d_star(u, v), beta.chart_id)


def area_density(g: MetricField) -> ScalarField:
    """Densità di eta1^eta2 rispetto a du^dv: sqrt(det g)."""
    def sampler(u, v):
        _, det = checked_inverse(g.matrix(u, v))
        return np.sqrt(det)

    return ScalarField(sampler, g.chart_id)


# --------------------------- Mesh e quadratura ---------------------------

class Mesh:
    """
    Insieme di nodi di quadratura, anche distribuiti su più carte.

    Attributes:
        u, v (np.ndarray): Coordinate dei nodi.
        weights (np.ndarray): Pesi positivi (unità di area di carta).
        chart_ids (np.ndarray): Carta di ciascun nodo.
        periodic (tuple): Flag di periodicità.
    """

    def __init__(self, u, v, weights, chart_ids, periodic: Tuple[bool, bool] = (False, False)):
        self.u = np.asarray(u, dtype=float).ravel()
        self.v = np.asarray(v, dtype=float).ravel()
        self.weights = np.asarray(weights, dtype=float).ravel()
        if isinstance(chart_ids, str):
            chart_ids = [chart_ids] * self.u.size
        self.chart_ids = np.asarray(chart_ids, dtype=object).ravel()
        self.periodic = periodic
        if not (self.u.size == self.v.size == self.weights.size == self.chart_ids.size):
            raise ArgumentError("Nodi e pesi della mesh devono avere la stessa lunghezza")
        if np.any(self.weights <= 0.0):
            raise ArgumentError("I pesi della mesh devono essere positivi")
        for chart_id in self.charts:
            get_chart(chart_id)

    def __len__(self) -> int:
        return self.u.size

    @property
    def charts(self) -> List[str]:
        return sorted(set(self.chart_ids.tolist()))

    @property
    def nodes(self) -> List[ChartPoint]:
        return [ChartPoint(u=float(a), v=float(b), chart_id=c) for a, b, c in zip(self.u, self.v, self.chart_ids)]

    def select(self, chart_id: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.chart_ids == chart_id
        return self.u[mask], self.v[mask], self.weights[mask]

    def total_weight(self) -> float:
        return float(np.sum(self.weights))


def unit_square_mesh(n: int, chart_id: str = "plane") -> Mesh:
    """Regola del punto medio su [0, 1]^2 con n x n nodi."""
    if n <= 0:
        raise ArgumentError("La risoluzione della mesh deve essere positiva")
    centers = (np.arange(n) + 0.5) / n
    U, V = np.meshgrid(centers, centers, indexing="ij")
    return Mesh(U, V, np.full(U.shape, 1.0 / n ** 2), chart_id, periodic=get_chart(chart_id).periodic)


def integrate_2form(omega: Union[TwoFormField, Mapping[str, TwoFormField]], mesh: Mesh) -> float:
    """
    Quadratura di una 2-forma: somma di pesi per densità.

    Args:
        omega: 2-forma su una carta oppure dizionario carta -> 2-forma.
        mesh (Mesh): Nodi e pesi.

    Returns:
        float: Valore dell'integrale.
    """
    if len(mesh) == 0:
        raise ArgumentError("Mesh vuota: impossibile integrare")
    forms = omega if isinstance(omega, Mapping) else {omega.chart_id: omega}
    total = 0.0
    for chart_id in mesh.charts:
        if chart_id not in forms:
            raise ArgumentError(f"Nessuna 2-forma definita sulla carta {chart_id}")
        u, v, w = mesh.select(chart_id)
        total += float(np.sum(w * forms[chart_id](u, v)))
    return total


def mesh_to_csv(mesh: Mesh, path: str) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["chart_id", "u", "v", "weight"])
            for chart_id, u, v, w in zip(mesh.chart_ids, mesh.u, mesh.v, mesh.weights):
                writer.writerow([chart_id, format(u, ".17g"), format(v, ".17g"), format(w, ".17g")])
    except OSError as e:
        raise ReportIOError("Errore nella scrittura della mesh: " + str(e))


# --------------------------- Griglie di campionamento ---------------------------

DEFAULT_BOXES: Dict[str, Tuple[float, float]] = {
    "plane": (-1.0, 1.0),
    "torus": (0.0, 1.0),
    "sphere_north": (-1.5, 1.5),
    "sphere_south": (-1.5, 1.5),
}


def sample_grid(chart_id: str, n: Optional[int] = None, box: Optional[Tuple[float, float]] = None,
                margin: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Griglia quadrata n x n di campionamento per una carta.

    Sulle carte periodiche la griglia è uniforme e semiaperta; altrove include gli estremi
    del box ridotti del margine.
    """
    n = n or projective_config.grid
    chart = get_chart(chart_id)
    lo, hi = box or DEFAULT_BOXES.get(chart_id, (-1.0, 1.0))
    if chart.periodic[0] and box is None:
        axis = lo + (hi - lo) * np.arange(n) / n
    else:
        axis = np.linspace(lo + margin, hi - margin, n)
    U, V = np.meshgrid(axis, axis, indexing="ij")
    return U, V
