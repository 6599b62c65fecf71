import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.linalg import expm

from app.projective.core.connections import (
    ChristoffelField,
    conformal_connection,
    gauss_curvature,
    weyl_compatibility_residual,
)
from app.projective.core.errors import ArgumentError, InvalidElementError
from app.projective.core.fields import (
    AtlasField,
    ChartPoint,
    Mesh,
    MetricField,
    OneFormField,
    ScalarField,
    TwoFormField,
    central_partials,
    checked_inverse,
    cholesky_coframe,
    codifferential,
    get_chart,
    integrate_2form,
    metric_components,
    sample_grid,
    unit_square_mesh,
)
from app.projective.core.geodesics import InitialCondition
from app.projective.core.utilities import projective_config, sup_norm

logger = logging.getLogger(__name__)

NORTH = "sphere_north"
SOUTH = "sphere_south"

# Costanti del secondo toro piatto, fisse nel codice: f = (a - c)^2 + 4 b^2 = 1.36
TORUS_PAIR_CONSTANTS = (2.0, 0.3, 1.0)


# --------------------------- Modelli di superficie ---------------------------

class SurfaceModel:
    """
    Superficie con atlante, caratteristica di Eulero e fabbrica di mesh.

    Le sottoclassi forniscono embedding e mappe di transizione quando esistono.
    """
    name: str = "surface"
    has_embedding: bool = False
    closed: bool = False

    def __init__(self, chart_ids: Sequence[str], euler_characteristic: int):
        self.charts = {chart_id: get_chart(chart_id) for chart_id in chart_ids}
        self.euler_characteristic = euler_characteristic

    @property
    def default_chart(self) -> str:
        return next(iter(self.charts))

    def embed(self, chart_id: str, u, v) -> np.ndarray:
        raise ArgumentError(f"Il modello {self.name} non ha un embedding")

    def needs_switch(self, chart_id: str, u, v) -> np.ndarray:
        return np.zeros(np.shape(u), dtype=bool)

    def transition(self, chart_id: str, u, v, du, dv):
        raise ArgumentError(f"Il modello {self.name} non ha mappe di transizione")

    def mesh(self, resolution=None) -> Mesh:
        raise NotImplementedError

    def random_initial_conditions(self, rng: np.random.Generator, count: int) -> List[InitialCondition]:
        points = rng.uniform(-0.5, 0.5, size=(count, 2))
        angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return [InitialCondition(point=ChartPoint(u=float(p[0]), v=float(p[1]), chart_id=self.default_chart),
                                 direction=(float(np.cos(a)), float(np.sin(a)))) for p, a in zip(points, angles)]

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, chi={self.euler_characteristic})"


class PlaneModel(SurfaceModel):
    name = "plane"

    def __init__(self):
        super().__init__(["plane"], 1)

    def mesh(self, resolution=None) -> Mesh:
        return unit_square_mesh(resolution or projective_config.torus_resolution, "plane")


class TorusModel(SurfaceModel):
    """Toro piatto R^2 / Z^2 su un'unica carta periodica."""
    name = "torus"
    closed = True

    def __init__(self):
        super().__init__(["torus"], 0)

    def mesh(self, resolution=None) -> Mesh:
        n = resolution or projective_config.torus_resolution
        axis = np.arange(n) / n
        U, V = np.meshgrid(axis, axis, indexing="ij")
        return Mesh(U, V, np.full(U.shape, 1.0 / n ** 2), "torus", periodic=(True, True))

    def random_initial_conditions(self, rng: np.random.Generator, count: int) -> List[InitialCondition]:
        points = rng.uniform(0.0, 1.0, size=(count, 2))
        angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
        return [InitialCondition(point=ChartPoint(u=float(p[0]), v=float(p[1]), chart_id="torus"),
                                 direction=(float(np.cos(a)), float(np.sin(a)))) for p, a in zip(points, angles)]


class SphereModel(SurfaceModel):
    """
    Sfera di raggio r con due carte stereografiche.

    sphere_north proietta dal polo nord (w = 0 è il polo sud), sphere_south dal polo sud con
    orientazione (u, -v). La transizione w -> r^2 (u, -v) / |w|^2 è un'involuzione.
    """
    name = "sphere"
    has_embedding = True
    closed = True

    def __init__(self, radius: float = 1.0, switch_radius: Optional[float] = None):
        if radius <= 0.0:
            raise ArgumentError("Il raggio della sfera deve essere positivo")
        super().__init__([NORTH, SOUTH], 2)
        self.radius = radius
        self.switch_radius = switch_radius or projective_config.switch_radius

    def _numerator(self, chart_id: str, u, v):
        r = self.radius
        q = u * u + v * v
        if chart_id == NORTH:
            return np.stack([2 * r * u, 2 * r * v, q - r * r], axis=-1), np.stack(
                [np.stack([np.full_like(u, 2 * r), np.zeros_like(u), 2 * u], axis=-1),
                 np.stack([np.zeros_like(u), np.full_like(u, 2 * r), 2 * v], axis=-1)], axis=-1)
        if chart_id == SOUTH:
            return np.stack([2 * r * u, -2 * r * v, r * r - q], axis=-1), np.stack(
                [np.stack([np.full_like(u, 2 * r), np.zeros_like(u), -2 * u], axis=-1),
                 np.stack([np.zeros_like(u), np.full_like(u, -2 * r), -2 * v], axis=-1)], axis=-1)
        raise ArgumentError(f"Carta {chart_id} non appartiene alla sfera")

    def embed(self, chart_id: str, u, v) -> np.ndarray:
        """Punto unitario di R^3 corrispondente a (u, v)."""
        u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
        numerator, _ = self._numerator(chart_id, u, v)
        return numerator / (self.radius ** 2 + u * u + v * v)[..., None]

    def embedding_jacobian(self, chart_id: str, u, v) -> np.ndarray:
        """Jacobiano (..., 3, 2) dell'embedding unitario."""
        u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
        numerator, d_numerator = self._numerator(chart_id, u, v)
        denominator = self.radius ** 2 + u * u + v * v
        d_denominator = np.stack([2 * u, 2 * v], axis=-1)
        return (d_numerator / denominator[..., None, None]
                - numerator[..., :, None] * d_denominator[..., None, :] / (denominator ** 2)[..., None, None])

    def chart_of(self, P: np.ndarray) -> Tuple[str, np.ndarray, np.ndarray]:
        """Coordinate di un punto unitario nella carta che lo contiene con |w| <= r."""
        P = np.asarray(P, dtype=float)
        r = self.radius
        if P[2] <= 0.0:
            return NORTH, r * P[0] / (1.0 - P[2]), r * P[1] / (1.0 - P[2])
        return SOUTH, r * P[0] / (1.0 + P[2]), -r * P[1] / (1.0 + P[2])

    def needs_switch(self, chart_id: str, u, v) -> np.ndarray:
        return np.hypot(u, v) > self.switch_radius * self.radius

    def transition(self, chart_id: str, u, v, du, dv):
        """
        Mappa di transizione e suo jacobiano applicato alla velocità.

        Returns:
            (carta di arrivo, u', v', du', dv')
        """
        target = SOUTH if chart_id == NORTH else NORTH
        r2 = self.radius ** 2
        q = u * u + v * v
        u2 = r2 * u / q
        v2 = -r2 * v / q
        j11 = r2 * (v * v - u * u) / q ** 2
        j12 = -2.0 * r2 * u * v / q ** 2
        j21 = 2.0 * r2 * u * v / q ** 2
        j22 = r2 * (u * u - v * v) / q ** 2
        return target, u2, v2, j11 * du + j12 * dv, j21 * du + j22 * dv

    def transition_hessian(self, u: float, v: float, step: float = 1e-4) -> np.ndarray:
        """Hessiano [i, b, c] della transizione per differenze centrali del jacobiano."""
        def jacobian(a, b):
            _, _, _, c1, c2 = self.transition(NORTH, a, b, 1.0, 0.0)
            _, _, _, c3, c4 = self.transition(NORTH, a, b, 0.0, 1.0)
            return np.array([[c1, c3], [c2, c4]])

        out = np.empty((2, 2, 2))
        out[:, :, 0] = (jacobian(u + step, v) - jacobian(u - step, v)) / (2 * step)
        out[:, :, 1] = (jacobian(u, v + step) - jacobian(u, v - step)) / (2 * step)
        return out

    def mesh(self, resolution=None) -> Mesh:
        return sphere_mesh(self.radius, resolution or projective_config.sphere_resolution)

    def random_initial_conditions(self, rng: np.random.Generator, count: int) -> List[InitialCondition]:
        points = rng.normal(size=(count, 3))
        points /= np.linalg.norm(points, axis=-1, keepdims=True)
        angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
        ics = []
        for P, a in zip(points, angles):
            chart_id, u, v = self.chart_of(P)
            ics.append(InitialCondition(point=ChartPoint(u=float(u), v=float(v), chart_id=chart_id),
                                        direction=(float(np.cos(a)), float(np.sin(a)))))
        return ics


def sphere_mesh(radius: float, resolution: Tuple[int, int], cap_epsilon: Optional[float] = None) -> Mesh:
    """
    Mesh latitudine-longitudine della sfera, un emisfero per carta.

    In ogni carta rho = r tan(alpha / 2) con alpha (distanza angolare dal polo della carta) nei
    punti medi di [eps, pi/2]. La calotta di raggio angolare eps viene aggiunta come nodo in
    w = 0 con peso pari alla sua area di carta pi (r tan(eps/2))^2.
    """
    eps = cap_epsilon or projective_config.cap_epsilon
    n_lon, n_lat = int(resolution[0]), int(resolution[1])
    n_alpha = max(1, n_lat // 2)
    if n_lon <= 0:
        raise ArgumentError("La risoluzione della mesh deve essere positiva")
    d_alpha = (np.pi / 2 - eps) / n_alpha
    d_lambda = 2 * np.pi / n_lon
    alpha = eps + (np.arange(n_alpha) + 0.5) * d_alpha
    lam = (np.arange(n_lon) + 0.5) * d_lambda
    A, L = np.meshgrid(alpha, lam, indexing="ij")
    rho = radius * np.tan(A / 2)
    weights = rho * (radius / 2) / np.cos(A / 2) ** 2 * d_alpha * d_lambda
    cap = np.pi * (radius * np.tan(eps / 2)) ** 2
    u = np.concatenate([(rho * np.cos(L)).ravel(), [0.0]])
    v = np.concatenate([(rho * np.sin(L)).ravel(), [0.0]])
    w = np.concatenate([weights.ravel(), [cap]])
    count = u.size
    return Mesh(np.concatenate([u, u]), np.concatenate([v, v]), np.concatenate([w, w]),
                [NORTH] * count + [SOUTH] * count)


def euclidean_plane() -> Tuple[PlaneModel, MetricField]:
    return PlaneModel(), MetricField(lambda u, v: (1.0, 0.0, 1.0), "plane")


def round_sphere(radius: float = 1.0) -> Tuple[SphereModel, AtlasField]:
    """
    Sfera rotonda: due carte stereografiche con fattore conforme 4 r^4 / (r^2 + u^2 + v^2)^2.

    Returns:
        (SphereModel, dizionario carta -> MetricField)
    """
    model = SphereModel(radius)

    def metric(chart_id: str) -> MetricField:
        def sampler(u, v):
            factor = 4.0 * radius ** 4 / (radius ** 2 + u * u + v * v) ** 2
            return (factor, 0.0, factor)
        return MetricField(sampler, chart_id)

    return model, {NORTH: metric(NORTH), SOUTH: metric(SOUTH)}


def flat_torus() -> TorusModel:
    return TorusModel()


def flat_torus_pair() -> Tuple[MetricField, MetricField]:
    """g1 = du^2 + dv^2, g2 = a du^2 + 2b du dv + c dv^2 con (a, b, c) = (2, 0.3, 1)."""
    a, b, c = TORUS_PAIR_CONSTANTS
    return MetricField(lambda u, v: (1.0, 0.0, 1.0), "torus"), MetricField(lambda u, v: (a, b, c), "torus")


MODEL_REGISTRY: Dict[str, Callable[[], SurfaceModel]] = {
    "sphere": lambda: SphereModel(),
    "torus": TorusModel,
    "plane": PlaneModel,
}


def get_model(name: str) -> SurfaceModel:
    try:
        return MODEL_REGISTRY[name]()
    except KeyError:
        raise ArgumentError(f"Modello sconosciuto: {name}")


def reference_metric(model: SurfaceModel) -> AtlasField:
    """Metrica di riferimento di un modello: rotonda, piatta o euclidea."""
    if isinstance(model, SphereModel):
        return round_sphere(model.radius)[1]
    if isinstance(model, TorusModel):
        return {"torus": flat_torus_pair()[0]}
    return {"plane": euclidean_plane()[1]}


def zero_oneform(model: SurfaceModel) -> AtlasField:
    return {chart_id: OneFormField(lambda u, v: (0.0, 0.0), chart_id) for chart_id in model.charts}


# --------------------------- Famiglia di Beltrami ---------------------------

class SL3Matrix(BaseModel):
    """psi in SL(3,R): normalizzata a det = 1 alla costruzione."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    matrix: np.ndarray = Field(..., description="Matrice 3x3 con det = 1")

    @field_validator("matrix", mode="before")
    def normalize(cls, value):
        arr = np.asarray(value, dtype=float)
        if arr.shape != (3, 3) or not np.all(np.isfinite(arr)):
            raise InvalidElementError("psi deve essere una matrice 3x3 finita")
        det = np.linalg.det(arr)
        if det <= 0.0:
            raise InvalidElementError(f"det psi = {det:.3e} <= 0")
        return arr / np.cbrt(det)

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.matrix))

    @property
    def ill_conditioned(self) -> bool:
        return self.condition > 1e3


def ambient_scalar(model: SphereModel, fn: Callable[[np.ndarray], np.ndarray]) -> AtlasField:
    """Pullback di una funzione su R^3 attraverso l'embedding, carta per carta."""
    return {chart_id: ScalarField(lambda u, v, c=chart_id: fn(model.embed(c, u, v)), chart_id)
            for chart_id in model.charts}


def ambient_oneform(model: SphereModel, covector: Callable[[np.ndarray], np.ndarray]) -> AtlasField:
    """Pullback di un campo di covettori A(P) su R^3: beta_a = A(P) . d_a P."""
    def build(chart_id: str) -> OneFormField:
        def sampler(u, v):
            P = model.embed(chart_id, u, v)
            return np.einsum("...i,...ia->...a", covector(P), model.embedding_jacobian(chart_id, u, v))
        return OneFormField(sampler, chart_id)

    return {chart_id: build(chart_id) for chart_id in model.charts}


def beltrami_metric(psi: SL3Matrix, model: Optional[SphereModel] = None) -> AtlasField:
    """
    Pullback psi*g della metrica rotonda tramite x -> psi x / |psi x|.

    Il jacobiano è analitico: J_Q = (I - Q Q^T) psi J_P / |psi P|, e g = r^2 J_Q^T J_Q.
    """
    model = model or SphereModel()
    if psi.ill_conditioned:
        logger.warning("psi mal condizionata: numero di condizionamento %.3e", psi.condition)
    matrix = psi.matrix
    r2 = model.radius ** 2

    def build(chart_id: str) -> MetricField:
        def sampler(u, v):
            P = model.embed(chart_id, u, v)
            JP = model.embedding_jacobian(chart_id, u, v)
            y = np.einsum("ij,...j->...i", matrix, P)
            norm = np.linalg.norm(y, axis=-1)
            Q = y / norm[..., None]
            JY = np.einsum("ij,...jc->...ic", matrix, JP)
            JQ = (JY - Q[..., :, None] * np.einsum("...i,...ic->...c", Q, JY)[..., None, :]) / norm[..., None, None]
            return metric_components(r2 * np.einsum("...ia,...ib->...ab", JQ, JQ))
        return MetricField(sampler, chart_id)

    return {chart_id: build(chart_id) for chart_id in model.charts}


def conformal_perturbation(metrics: AtlasField, model: SphereModel, amplitude: float = 0.2) -> AtlasField:
    """Controllo negativo: e^{2 sigma} g con sigma = amplitude (P_x P_z + P_y / 2), non di Beltrami."""
    def build(chart_id: str) -> MetricField:
        base = metrics[chart_id]

        def sampler(u, v):
            P = model.embed(chart_id, u, v)
            sigma = amplitude * (P[..., 0] * P[..., 2] + 0.5 * P[..., 1])
            return np.exp(2.0 * sigma)[..., None] * base(u, v)
        return MetricField(sampler, chart_id)

    return {chart_id: build(chart_id) for chart_id in metrics}


SL3_BASIS = np.array([
    [[0, 1, 0], [0, 0, 0], [0, 0, 0]],
    [[0, 0, 1], [0, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [1, 0, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 0, 1], [0, 0, 0]],
    [[0, 0, 0], [0, 0, 0], [1, 0, 0]],
    [[0, 0, 0], [0, 0, 0], [0, 1, 0]],
    [[1, 0, 0], [0, -1, 0], [0, 0, 0]],
    [[0, 0, 0], [0, 1, 0], [0, 0, -1]],
], dtype=float)

SO3_BASIS = np.array([
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    [[0, 0, -1], [0, 0, 0], [1, 0, 0]],
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
], dtype=float)

FAMILY_POINTS = np.array([(u, v) for u in (-0.9, -0.3, 0.3, 0.9) for v in (-0.6, 0.0, 0.6)])


class FamilyRank(BaseModel):
    rank: int = Field(..., description="Rango numerico del jacobiano")
    singular_values: List[float] = Field(..., description="Valori singolari in ordine decrescente")
    gap_ratio: float = Field(..., description="sigma_rank / sigma_{rank+1}")
    inconclusive: bool = Field(False, description="True se il gap è inferiore a 10")


def _family_sample(psi: np.ndarray, model: SphereModel, points: np.ndarray) -> np.ndarray:
    metric = beltrami_metric(SL3Matrix(matrix=psi), model)[NORTH]
    return metric(points[:, 0], points[:, 1]).ravel()


def family_jacobian(base: SL3Matrix, generators: np.ndarray = SL3_BASIS, fd_step: Optional[float] = None,
                    points: Optional[np.ndarray] = None, model: Optional[SphereModel] = None) -> np.ndarray:
    """Jacobiano (36, k) di psi -> componenti di psi*g nei punti fissi, lungo exp(eps X) psi."""
    fd_step = fd_step or projective_config.family_fd_step
    points = FAMILY_POINTS if points is None else np.asarray(points, dtype=float)
    model = model or SphereModel()
    columns = []
    for X in generators:
        plus = _family_sample(expm(fd_step * X) @ base.matrix, model, points)
        minus = _family_sample(expm(-fd_step * X) @ base.matrix, model, points)
        columns.append((plus - minus) / (2.0 * fd_step))
    return np.stack(columns, axis=-1)


def family_rank(base: SL3Matrix, fd_step: Optional[float] = None, points: Optional[np.ndarray] = None,
                rank_tol: float = 1e-6) -> FamilyRank:
    """
    Rango del jacobiano della mappa di Beltrami su sl(3,R); atteso 8 - dim SO(3) = 5.

    Returns:
        FamilyRank: rango, valori singolari, rapporto di gap, flag inconcludente.
    """
    sigma = np.linalg.svd(family_jacobian(base, SL3_BASIS, fd_step, points), compute_uv=False)
    rank = int(np.sum(sigma > rank_tol * sigma[0]))
    if rank >= sigma.size:
        gap = np.inf
    elif sigma[rank] == 0.0:
        gap = np.inf
    else:
        gap = float(sigma[rank - 1] / sigma[rank]) if rank > 0 else 0.0
    inconclusive = bool(gap < 10.0)
    if inconclusive:
        logger.warning("family_rank inconcludente: gap %.3e", gap)
    return FamilyRank(rank=rank, singular_values=[float(s) for s in sigma], gap_ratio=gap, inconclusive=inconclusive)


# --------------------------- Grado del fibrato normale ---------------------------

class DegreeResult(BaseModel):
    raw: float = Field(..., description="Valore grezzo -(1/pi) int (delta beta - K) dmu")
    degree: int = Field(..., description="Intero più vicino")
    precision_warning: bool = Field(False, description="True se il valore grezzo dista più di 0.1 da un intero")
    expected: Optional[int] = Field(None, description="2 chi della superficie, se chiusa")


def _as_atlas(field, model: SurfaceModel) -> dict:
    if isinstance(field, dict):
        return field
    return {field.chart_id: field}


def degree_normal_bundle(model: SurfaceModel, g, beta, resolution=None, h: Optional[float] = None,
                         h_gamma: Optional[float] = None) -> DegreeResult:
    """
    Grado tramite Gauss-Bonnet: -(1/pi) int (delta beta - K) dmu sulla mesh del modello.

    Args:
        model (SurfaceModel): Superficie chiusa.
        g, beta: Campi (o atlanti carta -> campo).
        resolution: Risoluzione della mesh.

    Returns:
        DegreeResult
    """
    if not model.closed:
        raise ArgumentError(f"Il modello {model.name} non è una superficie chiusa")
    metrics = _as_atlas(g, model)
    forms = _as_atlas(beta, model)
    densities = {}
    for chart_id in model.charts:
        metric = metrics[chart_id]
        K = gauss_curvature(metric, h_gamma)
        delta_beta = codifferential(forms[chart_id], metric, h=h)

        def density(u, v, metric=metric, K=K, delta_beta=delta_beta):
            _, det = checked_inverse(metric.matrix(u, v))
            return (delta_beta(u, v) - K(u, v)) * np.sqrt(det)

        densities[chart_id] = TwoFormField(density, chart_id)
    raw = -integrate_2form(densities, model.mesh(resolution)) / np.pi
    degree = int(round(raw))
    warning = bool(abs(raw - degree) > 0.1)
    if warning:
        logger.warning("Grado %.6f lontano da un intero: mesh troppo grossolana", raw)
    return DegreeResult(raw=raw, degree=degree, precision_warning=warning, expected=2 * model.euler_characteristic)


# --------------------------- Invariante f ---------------------------

class FInvariantResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    f: ScalarField
    identity_residual: float = Field(..., description="Sup di |df - 4 f (alpha - beta)|")
    precondition_residual: float = Field(..., description="Residuo di nabla h = 2 alpha (x) h")
    precondition_failed: bool = Field(False, description="True se la precondizione non vale")


def f_invariant(g: MetricField, h: MetricField, beta: OneFormField, alpha: OneFormField, grid=None,
                tol: Optional[float] = None, step: Optional[float] = None) -> FInvariantResult:
    """
    f = (h11 - h22)^2 + 4 h12^2 con h in componenti della cocornice g-ortonormale, e residuo
    dell'identità df = 4 f (alpha - beta).
    """
    tol = tol or projective_config.tol
    step = step or projective_config.h
    U, V = grid if grid is not None else sample_grid(g.chart_id, projective_config.interior_grid)

    def sampler(u, v):
        inverse, _ = checked_inverse(cholesky_coframe(g.matrix(u, v)), det_floor=0.0)
        H = np.einsum("...ai,...ab,...bj->...ij", inverse, h.matrix(u, v), inverse)
        return (H[..., 0, 0] - H[..., 1, 1]) ** 2 + 4.0 * H[..., 0, 1] ** 2

    f = ScalarField(sampler, g.chart_id)
    f_u, f_v = central_partials(f, U, V, step)
    rhs = 4.0 * f(U, V)[..., None] * (alpha(U, V) - beta(U, V))
    residual = sup_norm(np.stack([f_u, f_v], axis=-1) - rhs)
    precondition = weyl_compatibility_residual(conformal_connection(g, beta), h, alpha, (U, V)).sup_residual
    failed = bool(precondition > tol)
    if failed:
        logger.warning("f_invariant: precondizione nabla h = 2 alpha (x) h violata (residuo %.3e)", precondition)
    return FInvariantResult(f=f, identity_residual=residual, precondition_residual=precondition,
                            precondition_failed=failed)


# --------------------------- Transizioni e corpora casuali ---------------------------

def christoffel_transition_residual(model: SphereModel, connections: Dict[str, ChristoffelField],
                                    points: Optional[np.ndarray] = None) -> float:
    """
    Legge di trasformazione dei simboli di Christoffel attraverso la transizione stereografica:
    Gamma_N = J^{-1} (Gamma_S(J., J.) + d^2 T).
    """
    if points is None:
        radii = np.linspace(0.7, 1.4, 5) * model.radius
        angles = np.linspace(0.0, 2 * np.pi, 7, endpoint=False)
        points = np.array([(r * np.cos(a), r * np.sin(a)) for r in radii for a in angles])
    worst = 0.0
    for u, v in points:
        _, u2, v2, _, _ = model.transition(NORTH, u, v, 0.0, 0.0)
        _, _, _, a11, a21 = model.transition(NORTH, u, v, 1.0, 0.0)
        _, _, _, a12, a22 = model.transition(NORTH, u, v, 0.0, 1.0)
        J = np.array([[a11, a12], [a21, a22]])
        gamma_n = connections[NORTH](u, v)
        gamma_s = connections[SOUTH](u2, v2)
        pulled = np.einsum("ijk,jb,kc->ibc", gamma_s, J, J) + model.transition_hessian(u, v)
        expected = np.linalg.solve(J, pulled.reshape(2, 4)).reshape(2, 2, 2)
        worst = max(worst, sup_norm(gamma_n - expected))
    return worst


def random_sl3(rng: np.random.Generator, max_condition: Optional[float] = None, scale: float = 0.5) -> SL3Matrix:
    """psi = exp(X) con X in sl(3) casuale, scartando le estrazioni con condizionamento eccessivo."""
    max_condition = max_condition or projective_config.max_condition
    while True:
        X = rng.normal(size=(3, 3))
        X -= np.trace(X) / 3.0 * np.eye(3)
        X *= scale / np.linalg.norm(X)
        psi = SL3Matrix(matrix=expm(X))
        if psi.condition <= max_condition:
            return psi


def random_weyl_pair(rng: np.random.Generator, chart_id: str = "plane",
                     amplitude: float = 0.2) -> Tuple[MetricField, OneFormField]:
    """Coppia (g, beta) liscia e casuale: metrica conforme-anisotropa definita positiva e beta trigonometrica."""
    c = rng.uniform(-1.0, 1.0, size=12)
    k = rng.uniform(0.5, 1.5, size=4)

    def metric(u, v):
        sigma = amplitude * np.sin(k[0] * u + c[0]) * np.cos(k[1] * v + c[1])
        a = 1.0 + amplitude * c[2] * np.cos(u + c[3] * v)
        b = 0.5 * amplitude * c[4] * np.sin(v - c[5] * u)
        d = 1.0 + amplitude * c[6] * np.sin(u * v + c[7])
        scale = np.exp(2.0 * sigma)
        return (scale * a, scale * b, scale * d)

    def form(u, v):
        return (amplitude * c[8] * np.sin(k[2] * u + v + c[10]),
                amplitude * c[9] * np.cos(u - k[3] * v + c[11]))

    return MetricField(metric, chart_id), OneFormField(form, chart_id)


def random_sphere_oneform(rng: np.random.Generator, model: SphereModel, amplitude: float = 0.3) -> AtlasField:
    """beta globale sulla sfera: pullback del covettore A(P) = M P + c."""
    M = amplitude * rng.normal(size=(3, 3))
    c = amplitude * rng.normal(size=3)
    return ambient_oneform(model, lambda P: np.einsum("ij,...j->...i", M, P) + c)
