import csv
import io
import logging
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial import cKDTree

from app.projective.core.connections import ChristoffelField
from app.projective.core.errors import ArgumentError, ComparisonError, GeometryError, IntegrationError, ReportIOError
from app.projective.core.fields import ChartPoint, MetricField, get_chart
from app.projective.core.utilities import make_rng, projective_config, sup_norm

logger = logging.getLogger(__name__)

ConnectionLike = Union[ChristoffelField, Mapping[str, ChristoffelField]]


# --------------------------- Modelli ---------------------------

class InitialCondition(BaseModel):
    """
    Condizione iniziale di una geodetica.

    Attributes:
        point (ChartPoint): Punto di partenza.
        direction: Direzione in componenti di carta, normalizzata alla costruzione.
    """
    point: ChartPoint = Field(..., description="Punto iniziale")
    direction: Tuple[float, float] = Field(..., description="Direzione iniziale (normalizzata)")

    @field_validator("direction")
    def normalize(cls, value):
        norm = float(np.hypot(value[0], value[1]))
        if not np.isfinite(norm) or norm == 0.0:
            raise ArgumentError("La direzione iniziale deve essere non nulla")
        return (value[0] / norm, value[1] / norm)


class GeodesicPath(BaseModel):
    """
    Campioni ordinati di una geodetica.

    Attributes:
        chart_ids: Carta di ogni campione.
        uv: Coordinate di carta (N, 2).
        velocity: Velocità di carta (N, 2).
        embedded: Punti in R^3 (N, 3) se il modello fornisce un embedding.
        truncated: True se il cammino è uscito dall'atlante o è stato fermato per velocità divergente.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    chart_ids: List[str] = Field(..., description="Carta di ciascun campione")
    uv: np.ndarray = Field(..., description="Coordinate di carta")
    velocity: np.ndarray = Field(..., description="Velocità di carta")
    embedded: Optional[np.ndarray] = Field(None, description="Punti immersi (norma unitaria)")
    truncated: bool = Field(False, description="Cammino troncato (uscita dall'atlante o velocità divergente)")
    dt: float = Field(..., description="Passo temporale")

    def __len__(self) -> int:
        return self.uv.shape[0]

    @property
    def samples(self) -> List[ChartPoint]:
        return [ChartPoint(u=float(x[0]), v=float(x[1]), chart_id=c) for x, c in zip(self.uv, self.chart_ids)]

    def points(self) -> np.ndarray:
        """Punti di confronto: immersi se disponibili, altrimenti di carta."""
        return self.embedded if self.embedded is not None else self.uv

    def subpath(self, stop: int) -> "GeodesicPath":
        return GeodesicPath(chart_ids=self.chart_ids[:stop], uv=self.uv[:stop], velocity=self.velocity[:stop],
                            embedded=None if self.embedded is None else self.embedded[:stop],
                            truncated=self.truncated, dt=self.dt)


class PlanarityResult(BaseModel):
    defect: float = Field(..., description="sigma3 / sigma1 dei punti immersi")
    degenerate: bool = Field(False, description="Punti collineari (sigma2 / sigma1 < 1e-12)")


class GeodesicComparison(BaseModel):
    shares: bool = Field(..., description="True se la distanza massima tra tracce è sotto tol")
    max_distance: float = Field(..., description="Distanza massima tra tracce")
    mean_distance: float = Field(..., description="Distanza media tra tracce")
    n_samples: int = Field(..., description="Numero di condizioni iniziali")
    tol: float = Field(..., description="Tolleranza usata")
    truncated: int = Field(0, description="Cammini troncati")
    failed: int = Field(0, description="Condizioni iniziali la cui integrazione è fallita (distanza infinita)")


# --------------------------- Integrazione ---------------------------

def _connection_for(connection: ConnectionLike, chart_id: str) -> ChristoffelField:
    if isinstance(connection, Mapping):
        try:
            return connection[chart_id]
        except KeyError:
            raise ArgumentError(f"Nessuna connessione definita sulla carta {chart_id}")
    return connection


def _acceleration(gamma: ChristoffelField, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    return -np.einsum("...ijk,...j,...k->...i", gamma(x[..., 0], x[..., 1]), v, v)


def _rk4_step(gamma: ChristoffelField, x: np.ndarray, v: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    k1x, k1v = v, _acceleration(gamma, x, v)
    k2x = v + 0.5 * dt * k1v
    k2v = _acceleration(gamma, x + 0.5 * dt * k1x, k2x)
    k3x = v + 0.5 * dt * k2v
    k3v = _acceleration(gamma, x + 0.5 * dt * k2x, k3x)
    k4x = v + dt * k3v
    k4v = _acceleration(gamma, x + dt * k3x, k4x)
    x_next = x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    v_next = v + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return x_next, v_next


def integrate_geodesics(connection: ConnectionLike, ics: Sequence[InitialCondition], steps: Optional[int] = None,
                        dt: Optional[float] = None, model=None,
                        max_step: Optional[float] = None) -> List[GeodesicPath]:
    """
    Integra in blocco x'' + Gamma(x', x') = 0 con RK4 a passo fisso per molte condizioni iniziali.

    Un cammino si ferma (truncated) quando esce dall'atlante oppure quando un passo lo sposterebbe
    di più di `max_step` in coordinate di carta: per una connessione traslata proiettivamente la
    velocità di carta può divergere in tempo finito.

    Args:
        connection: ChristoffelField su una carta oppure dizionario carta -> ChristoffelField.
        ics: Condizioni iniziali.
        steps (int): Numero di passi.
        dt (float): Passo temporale.
        model: Modello di superficie per cambi di carta ed embedding (opzionale).
        max_step (float): Spostamento massimo |x'| dt per passo.

    Returns:
        List[GeodesicPath]: Un cammino per condizione iniziale.

    Raises:
        IntegrationError: se compaiono valori non finiti.
    """
    steps = steps or projective_config.steps
    dt = dt or projective_config.dt
    max_step = max_step or projective_config.max_chart_step
    count = len(ics)
    if count == 0:
        return []
    x = np.array([[ic.point.u, ic.point.v] for ic in ics], dtype=float)
    v = np.array([ic.direction for ic in ics], dtype=float)
    charts = np.array([ic.point.chart_id for ic in ics], dtype=object)
    alive = np.ones(count, dtype=bool)
    valid = np.full(count, steps + 1)
    xs = np.empty((steps + 1, count, 2))
    vs = np.empty((steps + 1, count, 2))
    chart_log = np.empty((steps + 1, count), dtype=object)
    xs[0], vs[0], chart_log[0] = x, v, charts

    for n in range(steps):
        active = np.nonzero(alive)[0]
        runaway = np.hypot(v[active, 0], v[active, 1]) * dt > max_step
        for i in active[runaway]:
            alive[i] = False
            valid[i] = n + 1
            logger.warning("Geodetica %d: velocità di carta oltre %.1e per passo al passo %d, cammino troncato",
                           i, max_step, n)
        active = active[~runaway]
        if active.size == 0:
            break
        for chart_id in sorted(set(charts[active].tolist())):
            sel = active[charts[active] == chart_id]
            x[sel], v[sel] = _rk4_step(_connection_for(connection, chart_id), x[sel], v[sel], dt)
        if not (np.all(np.isfinite(x[active])) and np.all(np.isfinite(v[active]))):
            raise IntegrationError(f"Valori non finiti durante l'integrazione al passo {n + 1}")
        if model is not None:
            for chart_id in sorted(set(charts[active].tolist())):
                sel = active[charts[active] == chart_id]
                switch = model.needs_switch(chart_id, x[sel, 0], x[sel, 1])
                if np.any(switch):
                    moved = sel[switch]
                    target, u2, v2, du2, dv2 = model.transition(chart_id, x[moved, 0], x[moved, 1], v[moved, 0], v[moved, 1])
                    x[moved] = np.stack([u2, v2], axis=-1)
                    v[moved] = np.stack([du2, dv2], axis=-1)
                    charts[moved] = target
        for i in active:
            if not bool(get_chart(charts[i]).contains(x[i, 0], x[i, 1])):
                alive[i] = False
                valid[i] = n + 1
                logger.warning("Geodetica %d uscita dall'atlante al passo %d: cammino troncato", i, n + 1)
        xs[n + 1], vs[n + 1], chart_log[n + 1] = x, v, charts

    paths = []
    for i in range(count):
        stop = valid[i]
        uv = xs[:stop, i].copy()
        chart_ids = [str(c) for c in chart_log[:stop, i]]
        embedded = None
        if model is not None and model.has_embedding:
            embedded = np.empty((stop, 3))
            ids = np.array(chart_ids, dtype=object)
            for chart_id in sorted(set(chart_ids)):
                mask = ids == chart_id
                embedded[mask] = model.embed(chart_id, uv[mask, 0], uv[mask, 1])
        paths.append(GeodesicPath(chart_ids=chart_ids, uv=uv, velocity=vs[:stop, i].copy(), embedded=embedded,
                                  truncated=bool(stop < steps + 1), dt=dt))
    logger.debug("integrate_geodesics: %d cammini, %d passi, dt %.1e", count, steps, dt)
    return paths


def integrate_geodesic(connection: ConnectionLike, ic: InitialCondition, steps: Optional[int] = None,
                       dt: Optional[float] = None, model=None, max_step: Optional[float] = None) -> GeodesicPath:
    return integrate_geodesics(connection, [ic], steps, dt, model, max_step)[0]


# --------------------------- Confronto tra tracce ---------------------------

def _segment_distances(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    direction = end - start
    length2 = np.einsum("...i,...i->...", direction, direction)
    offset = points - start
    safe = np.where(length2 > 0.0, length2, 1.0)
    t = np.clip(np.einsum("...i,...i->...", offset, direction) / safe, 0.0, 1.0)
    t = np.where(length2 > 0.0, t, 0.0)
    closest = start + t[..., None] * direction
    return np.linalg.norm(points - closest, axis=-1)


def _directed_distance(source: np.ndarray, target: np.ndarray) -> float:
    # Distanza massima dai punti di source alla spezzata target.
    if target.shape[0] == 1:
        return float(np.max(np.linalg.norm(source - target[0], axis=-1)))
    k = min(8, target.shape[0])
    _, idx = cKDTree(target).query(source, k=k)
    idx = np.asarray(idx).reshape(source.shape[0], k)
    last = target.shape[0] - 1
    best = np.full(source.shape[0], np.inf)
    for column in range(k):
        j = idx[:, column]
        for lo, hi in ((np.maximum(j - 1, 0), j), (j, np.minimum(j + 1, last))):
            best = np.minimum(best, _segment_distances(source, target[lo], target[hi]))
    return float(np.max(best))


def trace_distance(first: GeodesicPath, second: GeodesicPath) -> float:
    """
    Distanza di Hausdorff simmetrica tra le spezzate dei due cammini.

    Calcolata nell'embedding quando entrambi i cammini lo hanno, altrimenti in coordinate di
    carta purché entrambi stiano sulla stessa (unica) carta.
    """
    if len(first) == 0 or len(second) == 0:
        raise ArgumentError("I cammini da confrontare devono essere non vuoti")
    if first.embedded is not None and second.embedded is not None:
        a, b = first.embedded, second.embedded
    else:
        charts = set(first.chart_ids) | set(second.chart_ids)
        if len(charts) != 1:
            raise ComparisonError("Cammini su carte diverse e senza embedding: confronto impossibile")
        a, b = first.uv, second.uv
    return max(_directed_distance(a, b), _directed_distance(b, a))


def planarity_defect(path: GeodesicPath) -> PlanarityResult:
    """
    Difetto di planarità sigma3 / sigma1 dei punti immersi (zero per i cerchi massimi).

    Raises:
        ArgumentError: senza embedding o con meno di 10 campioni.
    """
    if path.embedded is None or path.embedded.shape[0] < 10:
        raise ArgumentError("Servono almeno 10 campioni immersi per il difetto di planarità")
    sigma = np.linalg.svd(path.embedded, compute_uv=False)
    degenerate = bool(sigma[1] / sigma[0] < 1e-12)
    if degenerate:
        logger.warning("Cammino degenere: punti immersi collineari")
    return PlanarityResult(defect=float(sigma[2] / sigma[0]), degenerate=degenerate)


def path_length(path: GeodesicPath) -> float:
    points = path.points()
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=-1)))


def clip_to_length(path: GeodesicPath, length: float) -> GeodesicPath:
    """Tronca il cammino ai campioni con lunghezza cumulata non superiore a `length`."""
    points = path.points()
    cumulative = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=-1))])
    stop = max(2, int(np.searchsorted(cumulative, length * (1.0 + 1e-12), side="right")))
    return path.subpath(min(stop, len(path)))


def metric_speed_drift(path: GeodesicPath, g: Union[MetricField, Mapping[str, MetricField]]) -> float:
    """Deriva relativa di g(x', x') lungo il cammino."""
    energy = np.empty(len(path))
    ids = np.array(path.chart_ids, dtype=object)
    for chart_id in sorted(set(path.chart_ids)):
        metric = g[chart_id] if isinstance(g, Mapping) else g
        mask = ids == chart_id
        G = metric.matrix(path.uv[mask, 0], path.uv[mask, 1])
        vel = path.velocity[mask]
        energy[mask] = np.einsum("...i,...ij,...j->...", vel, G, vel)
    return float(np.max(np.abs(energy - energy[0])) / energy[0])


def random_initial_conditions(rng: np.random.Generator, count: int, model=None,
                              box: Tuple[float, float] = (-0.5, 0.5)) -> List[InitialCondition]:
    """Condizioni iniziali casuali: punti uniformi nel box del modello, angoli uniformi."""
    if model is not None:
        return model.random_initial_conditions(rng, count)
    points = rng.uniform(box[0], box[1], size=(count, 2))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return [InitialCondition(point=ChartPoint(u=float(p[0]), v=float(p[1]), chart_id="plane"),
                             direction=(float(np.cos(a)), float(np.sin(a)))) for p, a in zip(points, angles)]


def _integrate_each(connection: ConnectionLike, ics: Sequence[InitialCondition], steps: int, dt: float, model,
                    max_step: float) -> List[Optional[GeodesicPath]]:
    # In blocco quando possibile; dopo un errore si riprova una geodetica alla volta e le
    # condizioni iniziali che falliscono restano None.
    try:
        return integrate_geodesics(connection, ics, steps, dt, model, max_step)
    except GeometryError as e:
        logger.warning("Integrazione in blocco fallita (%s): ripresa per singola geodetica", e.detail)
    paths: List[Optional[GeodesicPath]] = []
    for index, ic in enumerate(ics):
        try:
            paths.append(integrate_geodesic(connection, ic, steps, dt, model, max_step))
        except GeometryError as e:
            logger.warning("Geodetica %d non integrabile: %s", index, e.detail)
            paths.append(None)
    return paths


def shares_geodesics(first: ConnectionLike, second: ConnectionLike, n_samples: Optional[int] = None,
                     tol: Optional[float] = None, model=None, rng: Optional[np.random.Generator] = None,
                     steps: Optional[int] = None, dt: Optional[float] = None,
                     ics: Optional[Sequence[InitialCondition]] = None,
                     max_step: Optional[float] = None) -> GeodesicComparison:
    """
    Verifica per integrazione se due connessioni hanno le stesse geodetiche non parametrizzate.

    Per ogni condizione iniziale le due tracce vengono confrontate sulla stessa lunghezza. Una
    condizione iniziale la cui integrazione fallisce (metrica degenere, valori non finiti) conta
    come distanza infinita invece di interrompere il confronto.
    """
    tol = tol or projective_config.geodesic_tol
    n_samples = n_samples or projective_config.shift_geodesics
    steps = steps or projective_config.shift_steps
    dt = dt or projective_config.shift_dt
    max_step = max_step or projective_config.shift_max_step
    if ics is None:
        ics = random_initial_conditions(rng if rng is not None else make_rng(), n_samples, model)
    first_paths = _integrate_each(first, ics, steps, dt, model, max_step)
    second_paths = _integrate_each(second, ics, steps, dt, model, max_step)
    distances = []
    truncated = 0
    failed = 0
    for p1, p2 in zip(first_paths, second_paths):
        if p1 is None or p2 is None:
            failed += 1
            distances.append(np.inf)
            continue
        truncated += int(p1.truncated) + int(p2.truncated)
        common = min(path_length(p1), path_length(p2))
        distances.append(trace_distance(clip_to_length(p1, common), clip_to_length(p2, common)))
    distances = np.asarray(distances)
    max_distance = sup_norm(distances)
    logger.debug("shares_geodesics: distanza massima %.3e su %d tracce", max_distance, len(distances))
    return GeodesicComparison(shares=bool(max_distance < tol), max_distance=max_distance,
                              mean_distance=float(np.mean(distances)) if distances.size else 0.0,
                              n_samples=len(ics), tol=tol, truncated=truncated, failed=failed)


PATHS_CSV_HEADER = ["geodesic", "chart_id", "u", "v", "x", "y", "z"]


def paths_csv_text(paths: Sequence[GeodesicPath]) -> str:
    """Un blocco per geodetica: colonne geodesic, chart_id, u, v, x, y, z (vuote senza embedding)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PATHS_CSV_HEADER)
    for index, item in enumerate(paths):
        for n in range(len(item)):
            xyz = ["", "", ""] if item.embedded is None else [format(c, ".17g") for c in item.embedded[n]]
            writer.writerow([index, item.chart_ids[n], format(item.uv[n, 0], ".17g"),
                             format(item.uv[n, 1], ".17g")] + xyz)
    return buffer.getvalue()


def paths_to_csv(paths: Sequence[GeodesicPath], path: str) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(paths_csv_text(paths))
    except OSError as e:
        raise ReportIOError("Errore nella scrittura delle geodetiche: " + str(e))
