import logging
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from app.projective.cli.reports import CheckRecord, ConfigEcho, SuiteReport, write_atomic
from app.projective.core.cartan import (
    GroupElement,
    SectionField,
    complexify,
    element_from_complex,
    fab,
    finite_difference_jet,
    gauge_transform,
    gauge_transform_rotation_check,
    group_mul,
    jet_distance,
    jet_homomorphism_check,
    structure_residual,
    theta_general,
    two_jet_of_fab,
    w_closed_form,
    weyl_gauge,
)
from app.projective.core.connections import (
    DifferenceTensor,
    add,
    conformal_connection,
    conformal_kernel_singular_values,
    fitted_compatibility_residual,
    gauss_curvature,
    iota_embed,
    levi_civita,
    projectively_equivalent,
    ricci,
    schouten,
    trace,
    trace_free_part,
    weyl_compatibility_residual,
    weyl_connection_form,
    weyl_schouten,
)
from app.projective.core.errors import ArgumentError, UsageError
from app.projective.core.fields import (
    MetricField,
    OneFormField,
    ScalarField,
    TwoFormField,
    area_density,
    codifferential,
    exterior_derivative,
    exterior_derivative_oneform,
    integrate_2form,
    orthonormal_coframe,
    sample_grid,
)
from app.projective.core.geodesics import (
    InitialCondition,
    integrate_geodesics,
    paths_csv_text,
    planarity_defect,
    shares_geodesics,
)
from app.projective.core.models import (
    NORTH,
    SO3_BASIS,
    SL3Matrix,
    SphereModel,
    beltrami_metric,
    christoffel_transition_residual,
    conformal_perturbation,
    degree_normal_bundle,
    f_invariant,
    family_jacobian,
    family_rank,
    flat_torus,
    flat_torus_pair,
    get_model,
    random_sl3,
    random_sphere_oneform,
    random_weyl_pair,
    reference_metric,
    round_sphere,
    zero_oneform,
)
from app.projective.core.utilities import VerificationConfig, active_config, make_rng, observed_order, sup_norm

logger = logging.getLogger(__name__)

SUITE_NAMES = ("structure", "projective", "beltrami", "degree", "uniqueness", "jets")

# Passi esterni per le stime dell'ordine di convergenza (dimezzamento successivo)
ORDER_STEPS = (4e-2, 2e-2, 1e-2)


# --------------------------- Registrazione delle verifiche ---------------------------

class CheckRecorder:
    """
    Raccoglie i record di una suite.

    Ogni verifica è una funzione senza argomenti che restituisce un residuo; il residuo passa
    se è sotto la soglia oppure, con `at_least=True`, se la raggiunge (ordini, gap, controlli
    negativi).
    """

    def __init__(self, prefix: str, timings: bool = False):
        self.prefix = prefix
        self.timings = timings
        self.records: List[CheckRecord] = []

    def check(self, name: str, fn: Callable[[], float], tolerance: float, at_least: bool = False) -> float:
        start = time.perf_counter()
        residual = float(fn())
        elapsed = (time.perf_counter() - start) * 1000.0
        passed = residual >= tolerance if at_least else residual <= tolerance
        self.records.append(CheckRecord(name=f"{self.prefix}.{name}", residual=residual, tolerance=tolerance,
                                        passed=bool(passed), runtime_ms=elapsed if self.timings else None))
        level = logging.INFO if passed else logging.WARNING
        logger.log(level, "%s.%s: residuo %.3e (soglia %.1e) %s", self.prefix, name, residual, tolerance,
                   "OK" if passed else "FALLITA")
        return residual


def _relative(values: np.ndarray, reference: np.ndarray) -> float:
    return sup_norm(values - reference) / max(sup_norm(reference), 1e-12)


def _random_oneform(rng: np.random.Generator, chart_id: str, amplitude: float) -> OneFormField:
    # Componenti limitate da 2 * amplitude in sup-norm.
    c = rng.uniform(-1.0, 1.0, size=6)
    return OneFormField(lambda u, v: (amplitude * (c[0] + c[1] * np.sin(u + c[2] * v)),
                                      amplitude * (c[3] + c[4] * np.cos(c[5] * u - v))), chart_id)


def _periodic_oneform(rng: np.random.Generator, amplitude: float = 0.3) -> OneFormField:
    c = rng.uniform(-1.0, 1.0, size=3)
    return OneFormField(lambda u, v: (amplitude * c[0] * np.sin(2 * np.pi * u + c[1]),
                                      amplitude * c[2] * np.cos(2 * np.pi * (u + v))), "torus")


def _rescaled_pair(g: MetricField, beta: OneFormField, weight: ScalarField, h: float):
    """(e^{2u} g, beta + du) per una funzione peso u."""
    scaled = MetricField(lambda u, v: np.exp(2.0 * weight(u, v))[..., None] * g(u, v), g.chart_id)
    d_weight = exterior_derivative(weight, h)
    shifted = OneFormField(lambda u, v: beta(u, v) + d_weight(u, v), beta.chart_id)
    return scaled, shifted


def _connections(metrics: Dict[str, MetricField], h: Optional[float]) -> Dict[str, object]:
    return {chart_id: levi_civita(metric, h) for chart_id, metric in metrics.items()}


# --------------------------- Suite structure ---------------------------

def run_structure(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    """Equazioni di struttura, due pipeline per W, forma complessa ed equivarianza."""
    rng = make_rng(config.seed)
    model = get_model(model_name or "plane")
    chart_id = NORTH if isinstance(model, SphereModel) else model.default_chart
    g = reference_metric(model)[chart_id]
    beta = zero_oneform(model)[chart_id]
    flat_tol = 1e-4 if isinstance(model, SphereModel) else 1e-8
    grid = sample_grid(chart_id, config.interior_grid, box=(-1.0, 1.0))
    # K viene derivata due volte: la curvatura di riferimento usa il passo esterno h_structure.
    theta = weyl_gauge(g, beta, config.h, config.h_structure)
    curvature = structure_residual(theta, grid, config.h_structure)
    reference = complexify(theta, grid, config.h_structure)

    recorder.check("reference.shape_defect", lambda: curvature.shape_defect, flat_tol)
    recorder.check("reference.w", lambda: max(sup_norm(curvature.w1), sup_norm(curvature.w2)), flat_tol)
    recorder.check("reference.trace_defect", lambda: theta.trace_defect(*grid), 1e-10)
    recorder.check("reference.omega2", lambda: sup_norm(np.abs(reference.omega2(*grid))), 0.0)
    recorder.check("reference.complex", lambda: max(reference.sup_residuals().values()), flat_tol)

    interior = sample_grid("plane", config.interior_grid, box=(-0.8, 0.8))
    for k in range(config.structure_corpora):
        g_k, beta_k = random_weyl_pair(rng)
        theta_k = weyl_gauge(g_k, beta_k, config.h, config.h_gamma)
        res_k = structure_residual(theta_k, interior, config.h_structure)
        w1, w2 = w_closed_form(g_k, beta_k, config.h, config.h_gamma, config.h_structure)
        name = f"corpus{k}"

        recorder.check(f"{name}.w_agreement", lambda: max(_relative(res_k.w1, w1(*interior)),
                                                          _relative(res_k.w2, w2(*interior))), 1e-3)
        recorder.check(f"{name}.shape_order", lambda: observed_order(
            [structure_residual(theta_k, interior, step).shape_defect for step in ORDER_STEPS]), 1.9, at_least=True)
        recorder.check(f"{name}.trace_defect", lambda: theta_k.trace_defect(*interior), 1e-10)
        recorder.check(f"{name}.complex", lambda: max(
            complexify(theta_k, interior, config.h_structure).sup_residuals().values()), 1e-4)
        recorder.check(f"{name}.rotation_covariance", lambda: gauge_transform_rotation_check(
            theta_k, 0.7, interior, config.h_structure), 1e-6)

        def rescaling():
            weight = ScalarField(lambda u, v: 0.3 * np.sin(u + 0.5 * v), "plane")
            scaled, shifted = _rescaled_pair(g_k, beta_k, weight, config.h)
            w1s, w2s = w_closed_form(scaled, shifted, config.h, config.h_gamma, config.h_structure)
            factor = np.exp(-3.0 * weight(*interior))
            return max(_relative(w1s(*interior), factor * w1(*interior)),
                       _relative(w2s(*interior), factor * w2(*interior)))

        recorder.check(f"{name}.weyl_rescaling", rescaling, 1e-3)

    g_0, beta_0 = random_weyl_pair(rng)
    theta_0 = weyl_gauge(g_0, beta_0, config.h, config.h_gamma)
    r, phi = 1.3, 0.4

    def omega1_scaling():
        element = element_from_complex(0.3 - 0.2j, r, phi)
        before = complexify(theta_0, interior, config.h_structure).omega1(*interior)
        after = complexify(gauge_transform(theta_0, element), interior, config.h_structure).omega1(*interior)
        return sup_norm(np.abs(after - np.exp(1j * phi) / r ** 3 * before))

    def omega2_rotation():
        xi = SectionField(lambda u, v: (0.2 * np.sin(u), 0.1 * np.cos(v)), "plane")
        theta_xi = theta_general(weyl_connection_form(g_0, beta_0, config.h), weyl_schouten(g_0, beta_0, config.h),
                                 xi, orthonormal_coframe(g_0), config.h)
        element = element_from_complex(0j, r, phi)
        before = complexify(theta_xi, interior, config.h_structure).omega2(*interior)
        after = complexify(gauge_transform(theta_xi, element), interior, config.h_structure).omega2(*interior)
        return sup_norm(np.abs(after - np.exp(2j * phi) * before))

    recorder.check("gauge.omega1_scaling", omega1_scaling, 1e-8)
    recorder.check("gauge.omega2_rotation", omega2_rotation, 1e-8)


# --------------------------- Suite projective ---------------------------

def run_projective(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    """Criterio di Weyl, algebra della connessione conforme e condivisione delle geodetiche."""
    if model_name not in (None, "plane", "sphere"):
        raise UsageError(f"La suite projective confronta geodetiche su plane e sphere, non {model_name}")
    rng = make_rng(config.seed)
    grid = sample_grid("plane", config.grid)
    interior = sample_grid("plane", config.interior_grid, box=(-0.8, 0.8))
    g, beta = random_weyl_pair(rng)
    lc = levi_civita(g, config.h)

    alpha = _random_oneform(rng, "plane", 0.3)
    recorder.check("weyl_criterion.shift", lambda: projectively_equivalent(
        lc, add(lc, iota_embed(alpha)), config.tol, grid).residual, 1e-12)

    shifts = rng.uniform(-1.0, 1.0, size=8)
    phi = DifferenceTensor(lambda u, v: np.stack([np.sin(u + shifts[n] * v + n) for n in range(8)], axis=-1)
                           .reshape(np.shape(u) + (2, 2, 2)), "plane")
    recorder.check("decomposition", lambda: sup_norm(
        phi(*grid) - trace_free_part(phi)(*grid) - iota_embed(trace(phi))(*grid) / 3.0), 1e-12)

    north_grid = sample_grid(NORTH, config.grid)
    round_north = round_sphere()[1][NORTH]
    flat_north = MetricField(lambda u, v: (1.0, 0.0, 1.0), NORTH)
    recorder.check("weyl_criterion.negative", lambda: projectively_equivalent(
        levi_civita(flat_north, config.h), levi_civita(round_north, config.h), config.tol, north_grid).residual,
        10 * config.tol, at_least=True)

    def gauge_invariance():
        weight = ScalarField(lambda u, v: 0.3 * np.sin(u) * np.cos(v), "plane")
        scaled, shifted = _rescaled_pair(g, beta, weight, config.h)
        return sup_norm(conformal_connection(scaled, shifted, config.h)(*grid)
                        - conformal_connection(g, beta, config.h)(*grid))

    recorder.check("conformal.gauge_invariance", gauge_invariance, 1e-6)
    recorder.check("conformal.compatibility_order", lambda: observed_order([
        weyl_compatibility_residual(conformal_connection(g, beta, step), g, beta, interior, config.h).sup_residual
        for step in ORDER_STEPS]), 1.9, at_least=True)

    nabla = conformal_connection(g, beta, config.h)
    K = gauss_curvature(g, config.h_gamma)
    delta_beta = codifferential(beta, g, h=config.h)
    d_beta = exterior_derivative_oneform(beta, config.h)

    def ricci_formula():
        data = ricci(nabla, config.h_gamma)
        k = K(*interior) - delta_beta(*interior)
        # Parte antisimmetrica in coordinate: -(d beta)_12.
        return max(sup_norm(data.sym(*interior) - k[..., None, None] * g.matrix(*interior)),
                   sup_norm(data.skew(*interior) + d_beta(*interior)))

    def schouten_diagonal():
        S = schouten(nabla, orthonormal_coframe(g), config.h_gamma)(*interior)
        k = K(*interior) - delta_beta(*interior)
        return max(sup_norm(S[..., 0, 0] - k), sup_norm(S[..., 1, 1] - k))

    recorder.check("conformal.ricci", ricci_formula, 1e-5)
    recorder.check("conformal.schouten_diagonal", schouten_diagonal, 1e-5)
    recorder.check("conformal.schouten_closed_form", lambda: sup_norm(
        schouten(nabla, orthonormal_coframe(g), config.h_gamma)(*interior)
        - weyl_schouten(g, beta, config.h, config.h_gamma)(*interior)), 1e-5)

    sphere, round_metrics = round_sphere()
    round_conn = _connections(round_metrics, config.h)
    flat = levi_civita(MetricField(lambda u, v: (1.0, 0.0, 1.0), "plane"), config.h)
    sharing = dict(n_samples=config.shift_geodesics, tol=config.geodesic_tol, rng=rng,
                   steps=config.shift_steps, dt=config.shift_dt, max_step=config.shift_max_step)
    surfaces = ("plane", "sphere") if model_name is None else (model_name,)
    failures = {surface: 0 for surface in surfaces}
    worst = {surface: 0.0 for surface in surfaces}
    for _ in range(config.shift_samples):
        if "plane" in surfaces:
            shift = _random_oneform(rng, "plane", 0.15)
            result = shares_geodesics(flat, add(flat, iota_embed(shift)), **sharing)
            failures["plane"] += int(not result.shares)
            worst["plane"] = max(worst["plane"], result.max_distance)
        if "sphere" in surfaces:
            sphere_shift = random_sphere_oneform(rng, sphere, 0.1)
            shifted = {chart_id: add(round_conn[chart_id], iota_embed(sphere_shift[chart_id]))
                       for chart_id in round_conn}
            result = shares_geodesics(round_conn, shifted, model=sphere, **sharing)
            failures["sphere"] += int(not result.shares)
            worst["sphere"] = max(worst["sphere"], result.max_distance)
    for surface in surfaces:
        recorder.check(f"shares.{surface}.failures", lambda: failures[surface], 0)
        recorder.check(f"shares.{surface}.max_distance", lambda: worst[surface], config.geodesic_tol)

    if "sphere" in surfaces:
        perturbed_conn = _connections(conformal_perturbation(round_metrics, sphere, 0.3), config.h)
        recorder.check("shares.negative", lambda: shares_geodesics(
            round_conn, perturbed_conn, model=sphere, **sharing).max_distance, 10 * config.geodesic_tol,
            at_least=True)


# --------------------------- Suite beltrami ---------------------------

def run_beltrami(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    """Geodetiche della famiglia di Beltrami, criterio di Weyl e rango della famiglia."""
    if model_name not in (None, "sphere"):
        raise UsageError(f"La suite beltrami è definita solo sul modello sphere, non {model_name}")
    rng = make_rng(config.seed)
    sphere, round_metrics = round_sphere()
    round_conn = _connections(round_metrics, config.h)
    grid = sample_grid(NORTH, config.grid)

    planarity_failures = 0
    max_defect = 0.0
    criterion_failures = 0
    worst_residual = 0.0
    disagreements = 0
    for _ in range(config.beltrami_samples):
        conn = _connections(beltrami_metric(random_sl3(rng, config.max_condition), sphere), config.h)
        ics = sphere.random_initial_conditions(rng, config.beltrami_geodesics)
        for path in integrate_geodesics(conn, ics, config.beltrami_steps, config.beltrami_dt, sphere):
            defect = planarity_defect(path).defect
            max_defect = max(max_defect, defect)
            planarity_failures += int(defect >= config.planarity_tol)
        comparison = projectively_equivalent(conn[NORTH], round_conn[NORTH], config.tol, grid)
        worst_residual = max(worst_residual, comparison.residual)
        criterion_failures += int(not comparison.equivalent)
        sharing = shares_geodesics(round_conn, conn, config.shift_geodesics, config.geodesic_tol, model=sphere,
                                   rng=rng, steps=config.shift_steps, dt=config.shift_dt,
                                   max_step=config.shift_max_step)
        disagreements += int(sharing.shares != comparison.equivalent)

    logger.info("beltrami: %d cammini, difetto massimo %.3e", config.beltrami_samples * config.beltrami_geodesics,
                max_defect)
    recorder.check("planarity.failures", lambda: planarity_failures, 0)
    recorder.check("planarity.max_defect", lambda: max_defect, config.planarity_tol)
    recorder.check("weyl_criterion.failures", lambda: criterion_failures, 0)
    recorder.check("weyl_criterion.max_residual", lambda: worst_residual, config.tol)
    recorder.check("criteria_agree.disagreements", lambda: disagreements, 0)

    perturbed_conn = _connections(conformal_perturbation(round_metrics, sphere, 0.3), config.h)
    recorder.check("negative.weyl_criterion", lambda: projectively_equivalent(
        perturbed_conn[NORTH], round_conn[NORTH], config.tol, grid).residual, 10 * config.tol, at_least=True)

    identity = SL3Matrix(matrix=np.eye(3))
    base = family_rank(identity, config.family_fd_step)
    recorder.check("family.rank_identity", lambda: abs(base.rank - 5), 0)
    recorder.check("family.gap_identity", lambda: base.gap_ratio, 1e3, at_least=True)
    recorder.check("family.so3_kernel", lambda: sup_norm(
        family_jacobian(identity, SO3_BASIS, config.family_fd_step)), 1e-8)
    ranks = [family_rank(random_sl3(rng, config.max_condition), config.family_fd_step)
             for _ in range(config.rank_samples)]
    recorder.check("family.rank_random", lambda: sum(int(result.rank != 5) for result in ranks), 0)
    recorder.check("family.gap_random", lambda: min(result.gap_ratio for result in ranks), 1e3, at_least=True)

    conn = _connections(beltrami_metric(SL3Matrix(matrix=np.diag([2.0, 1.0, 0.5])), sphere), config.h)
    recorder.check("transition.christoffel", lambda: christoffel_transition_residual(sphere, conn), 1e-5)


# --------------------------- Suite degree ---------------------------

def run_degree(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    """Grado del fibrato normale via Gauss-Bonnet su sfera e toro."""
    if model_name not in (None, "sphere", "torus"):
        raise UsageError(f"La suite degree richiede una superficie chiusa, non {model_name}")
    rng = make_rng(config.seed)
    if model_name in (None, "sphere"):
        sphere, metrics = round_sphere()
        resolution = tuple(config.sphere_resolution)
        result = degree_normal_bundle(sphere, metrics, zero_oneform(sphere), resolution, config.h, config.h_gamma)
        recorder.check("sphere.raw", lambda: abs(result.raw - 4.0), 1e-3)
        recorder.check("sphere.integer", lambda: abs(result.degree - result.expected), 0)

        areas = {chart_id: TwoFormField(area_density(metric), chart_id) for chart_id, metric in metrics.items()}
        recorder.check("sphere.area", lambda: abs(integrate_2form(areas, sphere.mesh(resolution)) - 4 * np.pi)
                       / (4 * np.pi), 1e-3)
        errors = [abs(integrate_2form(areas, sphere.mesh((n, n // 2))) - 4 * np.pi) for n in (40, 80)]
        recorder.check("sphere.area_convergence", lambda: errors[0] / errors[1], 3.5, at_least=True)

        raws = [degree_normal_bundle(sphere, metrics, random_sphere_oneform(rng, sphere, 0.3), resolution,
                                     config.h, config.h_gamma).raw for _ in range(10)]
        recorder.check("sphere.beta_spread", lambda: max(raws) - min(raws), 2e-3)
    if model_name in (None, "torus"):
        torus = flat_torus()
        for name, metric in zip(("g1", "g2"), flat_torus_pair()):
            result = degree_normal_bundle(torus, metric, _periodic_oneform(rng), config.torus_resolution,
                                          config.h, config.h_gamma)
            recorder.check(f"torus.{name}.raw", lambda: abs(result.raw), 1e-6)


# --------------------------- Suite uniqueness ---------------------------

def run_uniqueness(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    """Invariante f, nucleo conforme e rigidità della compatibilità di Weyl."""
    rng = make_rng(config.seed)
    g1, g2 = flat_torus_pair()
    zero = OneFormField(lambda u, v: (0.0, 0.0), "torus")
    torus_grid = sample_grid("torus", config.interior_grid)
    torus = f_invariant(g1, g2, zero, zero, torus_grid, config.tol, config.h)
    recorder.check("torus.f_value", lambda: sup_norm(torus.f(*torus_grid) - 1.36), 1e-12)
    recorder.check("torus.identity", lambda: torus.identity_residual, 1e-10)
    recorder.check("torus.same_connection", lambda: max(sup_norm(levi_civita(g1, config.h)(*torus_grid)),
                                                        sup_norm(levi_civita(g2, config.h)(*torus_grid))), 0.0)

    grid = sample_grid("plane", config.interior_grid)
    g, beta = random_weyl_pair(rng)
    weight = ScalarField(lambda u, v: 0.4 * np.cos(u - v), "plane")
    h, alpha = _rescaled_pair(g, beta, weight, config.h)
    conformal = f_invariant(g, h, beta, alpha, grid, config.tol, config.h)
    recorder.check("conformal.f_zero", lambda: sup_norm(conformal.f(*grid)), 1e-10)
    recorder.check("conformal.identity", lambda: conformal.identity_residual, 1e-8)

    sphere, metrics = round_sphere()
    zero_north = zero_oneform(sphere)[NORTH]
    beltrami_north = beltrami_metric(SL3Matrix(matrix=np.diag([2.0, 1.0, 0.5])), sphere)[NORTH]
    guard = f_invariant(metrics[NORTH], beltrami_north, zero_north, zero_north,
                        sample_grid(NORTH, config.interior_grid), config.tol, config.h)
    recorder.check("beltrami.precondition_flagged", lambda: guard.precondition_residual, config.tol, at_least=True)

    ratios = []
    for _ in range(100):
        g_k, _ = random_weyl_pair(rng)
        u, v = rng.uniform(-1.0, 1.0, size=2)
        sigma = conformal_kernel_singular_values(g_k, u, v)
        ratios.append(sigma[-1] / sigma[0])
    recorder.check("kernel.trivial", lambda: min(ratios), 1e-3, at_least=True)

    euclidean = MetricField(lambda u, v: (1.0, 0.0, 1.0), "plane")
    beta_e = _random_oneform(rng, "plane", 0.3)
    fitted = []
    for _ in range(5):
        shift = _random_oneform(rng, "plane", 0.5)
        shifted = add(conformal_connection(euclidean, beta_e, config.h), iota_embed(shift))
        fitted.append(fitted_compatibility_residual(shifted, euclidean, grid, config.h) / sup_norm(shift(*grid)))
    recorder.check("rigidity.fitted_ratio", lambda: min(fitted), 0.5, at_least=True)


# --------------------------- Suite jets ---------------------------

def random_element(rng: np.random.Generator, b_max: float = 0.5) -> GroupElement:
    """Elemento casuale di G con det a > 0 e |b| <= b_max."""
    a = expm(0.4 * rng.normal(size=(2, 2)))
    b = rng.normal(size=2)
    b *= b_max * rng.uniform() / max(float(np.linalg.norm(b)), 1e-12)
    return GroupElement(a=a, b=b)


def run_jets(config: VerificationConfig, model_name: Optional[str], recorder: CheckRecorder) -> None:
    rng = make_rng(config.seed)
    pairs = [(random_element(rng), random_element(rng)) for _ in range(100)]
    recorder.check("homomorphism", lambda: max(jet_homomorphism_check(first, second) for first, second in pairs),
                   1e-9)
    recorder.check("closure", lambda: max(sup_norm(group_mul(first, second).matrix()
                                                   - first.matrix() @ second.matrix()) for first, second in pairs),
                   1e-12)
    recorder.check("fd_oracle", lambda: max(jet_distance(two_jet_of_fab(first), finite_difference_jet(
        lambda x, element=first: fab(element, x))) for first, _ in pairs[:10]), 1e-6)


SUITES: Dict[str, Callable[[VerificationConfig, Optional[str], CheckRecorder], None]] = {
    "structure": run_structure,
    "projective": run_projective,
    "beltrami": run_beltrami,
    "degree": run_degree,
    "uniqueness": run_uniqueness,
    "jets": run_jets,
}


def run_suite(name: str, config: VerificationConfig, model_name: Optional[str] = None,
              timings: bool = False) -> SuiteReport:
    """
    Esegue una suite di verifica, oppure tutte con "all".

    Args:
        name (str): Nome della suite.
        config (VerificationConfig): Parametri numerici.
        model_name (str): Modello di superficie; se omesso ogni suite usa il proprio.
        timings (bool): Registra runtime_ms nei record.

    Returns:
        SuiteReport: deterministico a parità di configurazione e seed.

    Raises:
        UsageError: suite sconosciuta o modello incompatibile.
    """
    if name != "all" and name not in SUITES:
        raise UsageError(f"Suite sconosciuta: {name}")
    if model_name is not None:
        try:
            get_model(model_name)
        except ArgumentError as e:
            raise UsageError(e.detail)
    records: List[CheckRecord] = []
    with active_config(config):
        for suite in (SUITE_NAMES if name == "all" else (name,)):
            recorder = CheckRecorder(suite, timings)
            logger.info("Suite %s (modello %s)", suite, model_name or "predefinito")
            SUITES[suite](config, model_name, recorder)
            records.extend(recorder.records)
    return SuiteReport(suite=name, config=ConfigEcho.from_config(config, model_name), records=records)


# --------------------------- Esportazione delle geodetiche ---------------------------

def parse_metric_spec(model_name: str, metric_spec: str):
    """
    Interpreta una specifica di metrica per il modello dato.

    Formati: "round", "beltrami:d1,d2,d3" (diagonale) oppure "beltrami:" seguito da nove valori
    per riga, "euclidean", "g1" e "g2" (coppia di tori piatti).

    Returns:
        (SurfaceModel, dizionario carta -> MetricField)
    """
    try:
        model = get_model(model_name)
    except ArgumentError as e:
        raise UsageError(e.detail)
    kind, _, arguments = metric_spec.partition(":")
    if isinstance(model, SphereModel):
        if kind == "round" and not arguments:
            return model, round_sphere(model.radius)[1]
        if kind == "beltrami":
            try:
                values = [float(item) for item in arguments.split(",")]
            except ValueError:
                raise UsageError(f"Valori non numerici in {metric_spec!r}")
            if len(values) == 3:
                matrix = np.diag(values)
            elif len(values) == 9:
                matrix = np.array(values).reshape(3, 3)
            else:
                raise UsageError("beltrami richiede 3 valori diagonali oppure 9 valori per riga")
            return model, beltrami_metric(SL3Matrix(matrix=matrix), model)
    elif kind == "euclidean" and not arguments:
        return model, reference_metric(model)
    elif model.name == "torus" and kind in ("g1", "g2"):
        g1, g2 = flat_torus_pair()
        return model, {"torus": g1 if kind == "g1" else g2}
    raise UsageError(f"Metrica {metric_spec!r} non disponibile sul modello {model_name}")


def emit_geodesics(model_name: str, metric_spec: str, ics: Sequence[InitialCondition], path: str,
                   steps: Optional[int] = None, dt: Optional[float] = None, h: Optional[float] = None) -> int:
    """
    Integra le geodetiche della metrica indicata e le scrive in CSV, un blocco per geodetica.

    Args:
        model_name (str): "sphere", "torus" o "plane".
        metric_spec (str): Specifica della metrica (vedi parse_metric_spec).
        ics: Condizioni iniziali; una lista vuota produce il solo header.
        path (str): File di destinazione, scritto in modo atomico.

    Returns:
        int: numero di geodetiche scritte.
    """
    model, metrics = parse_metric_spec(model_name, metric_spec)
    paths = integrate_geodesics(_connections(metrics, h), list(ics), steps, dt, model) if ics else []
    write_atomic(path, paths_csv_text(paths))
    logger.info("emit_geodesics: %d geodetiche scritte in %s", len(paths), path)
    return len(paths)
