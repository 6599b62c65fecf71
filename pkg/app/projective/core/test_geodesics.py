import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.projective.core.connections import ChristoffelField, add, iota_embed, levi_civita
from app.projective.core.errors import ArgumentError, ComparisonError, IntegrationError
from app.projective.core.fields import ChartPoint, MetricField, OneFormField
from app.projective.core.geodesics import (
    PATHS_CSV_HEADER,
    GeodesicPath,
    InitialCondition,
    integrate_geodesic,
    integrate_geodesics,
    metric_speed_drift,
    path_length,
    paths_csv_text,
    paths_to_csv,
    planarity_defect,
    shares_geodesics,
    trace_distance,
)
from app.projective.core.models import NORTH, SOUTH, conformal_perturbation, random_weyl_pair, round_sphere
from app.projective.core.utilities import make_rng

FLAT = levi_civita(MetricField(lambda u, v: (1.0, 0.0, 1.0)))


def ic(u, v, du, dv, chart_id="plane"):
    return InitialCondition(point=ChartPoint(u=u, v=v, chart_id=chart_id), direction=(du, dv))


def sphere_connections():
    sphere, metrics = round_sphere()
    return sphere, metrics, {chart_id: levi_civita(metrics[chart_id]) for chart_id in metrics}


def embedded_path(points):
    points = np.asarray(points, dtype=float)
    count = points.shape[0]
    return GeodesicPath(chart_ids=[NORTH] * count, uv=np.zeros((count, 2)), velocity=np.zeros((count, 2)),
                        embedded=points, dt=1e-3)


def circle(z, count=200):
    t = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    radius = np.sqrt(1.0 - z ** 2)
    return np.stack([radius * np.cos(t), radius * np.sin(t), np.full_like(t, z)], axis=-1)


# ---------------------------
# Integrazione
# ---------------------------

class TestInitialCondition:
    def test_direction_is_normalized(self):
        assert_allclose(ic(0.0, 0.0, 3.0, 4.0).direction, (0.6, 0.8))

    def test_zero_direction_rejected(self):
        with pytest.raises(ArgumentError):
            ic(0.0, 0.0, 0.0, 0.0)


class TestIntegrateGeodesics:
    def test_flat_straight_line(self):
        path = integrate_geodesic(FLAT, ic(0.1, -0.2, 1.0, 2.0), steps=500, dt=1e-3)
        t = np.arange(501) * 1e-3
        expected = np.stack([0.1 + t / np.sqrt(5.0), -0.2 + 2.0 * t / np.sqrt(5.0)], axis=-1)
        assert np.max(np.abs(path.uv - expected)) < 1e-10
        assert not path.truncated

    def test_sphere_equator(self):
        sphere, _, connections = sphere_connections()
        steps = 6400
        path = integrate_geodesic(connections, ic(1.0, 0.0, 0.0, 1.0, NORTH), steps=steps, dt=1e-3, model=sphere)
        assert len(path) == steps + 1
        assert np.max(np.abs(path.embedded[:, 2])) < 1e-9
        # Il primo ritorno al punto iniziale avviene dopo una lunghezza 2 pi.
        later = np.arange(len(path)) > steps // 2
        distance = np.linalg.norm(path.embedded - path.embedded[0], axis=-1)
        period = np.argmin(np.where(later, distance, np.inf)) * 1e-3
        assert period == pytest.approx(2.0 * np.pi, abs=2e-3)

    def test_chart_switch_keeps_great_circle(self):
        sphere, _, connections = sphere_connections()
        path = integrate_geodesic(connections, ic(0.0, 0.0, 1.0, 0.0, NORTH), steps=3000, dt=2e-3, model=sphere)
        assert SOUTH in path.chart_ids
        assert planarity_defect(path).defect < 1e-6

    def test_energy_is_conserved(self):
        g, _ = random_weyl_pair(make_rng(31))
        path = integrate_geodesic(levi_civita(g), ic(0.1, 0.2, 1.0, -0.5), steps=2000, dt=1e-3)
        assert metric_speed_drift(path, g) < 1e-6

    def test_empty_batch(self):
        assert integrate_geodesics(FLAT, [], steps=10, dt=1e-3) == []

    def test_exit_truncates(self):
        flat_north = levi_civita(MetricField(lambda u, v: (1.0, 0.0, 1.0), NORTH))
        path = integrate_geodesic(flat_north, ic(9.5, 0.0, 1.0, 0.0, NORTH), steps=20, dt=0.1)
        assert path.truncated
        assert len(path) < 21

    def test_rk4_is_fourth_order(self):
        # Con alpha = (-1/2, 0) la traccia lungo u ha u' = 1 / (1 - t): u(1/2) = ln 2.
        shifted = add(FLAT, iota_embed(OneFormField(lambda u, v: (-0.5, 0.0))))
        errors = [abs(integrate_geodesic(shifted, ic(0.0, 0.0, 1.0, 0.0), steps=steps, dt=0.5 / steps).uv[-1, 0]
                      - np.log(2.0)) for steps in (50, 100)]
        assert errors[0] / errors[1] >= 14.0

    def test_rk4_order_on_equator(self):
        # Christoffel esatti di 4 / (1 + r^2)^2 delta: phi_i = -2 x_i / (1 + r^2).
        def sampler(u, v):
            dphi = np.stack([u, v], axis=-1) * (-2.0 / (1.0 + u ** 2 + v ** 2))[..., None]
            eye = np.eye(2)
            return (np.einsum("ij,...k->...ijk", eye, dphi) + np.einsum("ik,...j->...ijk", eye, dphi)
                    - np.einsum("jk,...i->...ijk", eye, dphi))

        exact = ChristoffelField(sampler, NORTH)
        errors = [np.hypot(*(integrate_geodesic(exact, ic(1.0, 0.0, 0.0, 1.0, NORTH), steps=steps,
                                                dt=1.0 / steps).uv[-1] - (np.cos(1.0), np.sin(1.0))))
                  for steps in (20, 40)]
        assert errors[0] / errors[1] >= 14.0

    def test_runaway_speed_truncates(self):
        # u' = 1 / (1 - 2t) diverge a t = 1/2: il cammino si ferma prima della singolarità.
        shifted = add(FLAT, iota_embed(OneFormField(lambda u, v: (-1.0, 0.0))))
        path = integrate_geodesic(shifted, ic(0.0, 0.0, 1.0, 0.0), steps=1500, dt=2e-3, max_step=0.02)
        assert path.truncated
        assert len(path) < 1501
        assert np.all(np.isfinite(path.uv))

    def test_non_finite_values(self):
        broken = ChristoffelField(lambda u, v: np.full(np.shape(u) + (2, 2, 2), np.nan))
        with pytest.raises(IntegrationError):
            integrate_geodesic(broken, ic(0.0, 0.0, 1.0, 0.0), steps=5, dt=1e-3)


# ---------------------------
# Confronto tra tracce e planarità
# ---------------------------

class TestTraceDistance:
    def test_self_distance_is_zero(self):
        path = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 1.0), steps=100, dt=1e-2)
        assert trace_distance(path, path) == 0.0

    def test_parallel_segments(self):
        first = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=100, dt=1e-2)
        second = integrate_geodesic(FLAT, ic(0.0, 0.1, 1.0, 0.0), steps=100, dt=1e-2)
        assert trace_distance(first, second) == pytest.approx(0.1, abs=1e-12)
        assert trace_distance(first, second) == trace_distance(second, first)

    def test_resampling_does_not_matter(self):
        coarse = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=10, dt=1e-1)
        fine = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=1000, dt=1e-3)
        assert trace_distance(coarse, fine) < 1e-12

    def test_different_charts_without_embedding(self):
        first = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=5, dt=1e-2)
        flat_north = levi_civita(MetricField(lambda u, v: (1.0, 0.0, 1.0), NORTH))
        second = integrate_geodesic(flat_north, ic(0.0, 0.0, 1.0, 0.0, NORTH), steps=5, dt=1e-2)
        with pytest.raises(ComparisonError):
            trace_distance(first, second)

    def test_path_length(self):
        path = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=100, dt=1e-2)
        assert path_length(path) == pytest.approx(1.0, abs=1e-12)


class TestPlanarity:
    def test_equator(self):
        assert planarity_defect(embedded_path(circle(0.0))).defect < 1e-12

    def test_latitude_circle(self):
        assert planarity_defect(embedded_path(circle(np.sqrt(0.5)))).defect > 0.1

    def test_noisy_great_circle(self):
        points = circle(0.0) + 1e-3 * make_rng(5).normal(size=(200, 3))
        assert planarity_defect(embedded_path(points)).defect > 1e-5

    def test_too_few_samples(self):
        with pytest.raises(ArgumentError):
            planarity_defect(embedded_path(circle(0.0, count=9)))

    def test_missing_embedding(self):
        path = integrate_geodesic(FLAT, ic(0.0, 0.0, 1.0, 0.0), steps=20, dt=1e-2)
        with pytest.raises(ArgumentError):
            planarity_defect(path)


class TestSharesGeodesics:
    def test_projective_shift(self):
        shift = OneFormField(lambda u, v: (0.15 * np.sin(u + v), 0.1 * np.cos(2.0 * u)))
        result = shares_geodesics(FLAT, add(FLAT, iota_embed(shift)), n_samples=4, tol=1e-3, rng=make_rng(8),
                                  steps=1500, dt=2e-3)
        assert result.shares
        assert result.n_samples == 4

    def test_conformal_perturbation_is_detected(self):
        sphere, metrics, connections = sphere_connections()
        perturbed = {chart_id: levi_civita(metric)
                     for chart_id, metric in conformal_perturbation(metrics, sphere, 0.3).items()}
        result = shares_geodesics(connections, perturbed, n_samples=4, tol=1e-3, model=sphere, rng=make_rng(9),
                                  steps=1500, dt=2e-3)
        assert not result.shares
        assert result.max_distance > 1e-2

    def test_explicit_initial_conditions(self):
        result = shares_geodesics(FLAT, FLAT, ics=[ic(0.0, 0.0, 1.0, 0.0)], steps=50, dt=1e-2)
        assert result.max_distance == 0.0
        assert result.n_samples == 1

    def test_runaway_shift_still_compared(self):
        shifted = add(FLAT, iota_embed(OneFormField(lambda u, v: (-1.0, 0.0))))
        result = shares_geodesics(FLAT, shifted, ics=[ic(0.0, 0.0, 1.0, 0.0)], steps=1500, dt=2e-3)
        assert result.shares
        assert result.truncated >= 1
        assert result.failed == 0
        assert result.max_distance < 1e-9

    def test_failed_geodesic_counts_as_infinite(self):
        broken = ChristoffelField(lambda u, v: np.where(np.asarray(u)[..., None, None, None] > 0.5, np.nan,
                                                        np.zeros(np.shape(u) + (2, 2, 2))))
        result = shares_geodesics(FLAT, broken, ics=[ic(0.0, 0.0, 1.0, 0.0), ic(0.0, 0.0, -1.0, 0.0)],
                                  steps=100, dt=1e-2)
        assert result.failed == 1
        assert result.n_samples == 2
        assert result.max_distance == np.inf
        assert not result.shares


# ---------------------------
# CSV
# ---------------------------

class TestPathsCsv:
    def test_header_only(self):
        assert paths_csv_text([]) == ",".join(PATHS_CSV_HEADER) + "\n"

    def test_blocks(self):
        paths = integrate_geodesics(FLAT, [ic(0.0, 0.0, 1.0, 0.0), ic(0.0, 0.0, 0.0, 1.0)], steps=3, dt=1e-1)
        lines = paths_csv_text(paths).splitlines()
        assert len(lines) == 1 + 2 * 4
        assert lines[1].startswith("0,plane,")
        assert lines[-1].startswith("1,plane,")
        assert lines[1].endswith(",,,")

    def test_embedded_columns(self, tmp_path):
        sphere, _, connections = sphere_connections()
        path = integrate_geodesic(connections, ic(1.0, 0.0, 0.0, 1.0, NORTH), steps=10, dt=1e-2, model=sphere)
        target = tmp_path / "paths.csv"
        paths_to_csv([path], str(target))
        rows = target.read_text(encoding="utf-8").splitlines()[1:]
        z = np.array([float(row.split(",")[6]) for row in rows])
        assert np.max(np.abs(z)) < 1e-9
