import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from app.projective.core.cartan import (
    GroupElement,
    GroupElementField,
    SectionField,
    compose_jets,
    complexify,
    element_from_complex,
    fab,
    finite_difference_jet,
    gauge_transform,
    gauge_transform_rotation_check,
    group_inverse,
    group_mul,
    identity_element,
    jet_distance,
    jet_homomorphism_check,
    structure_residual,
    theta_general,
    two_jet_of_fab,
    w_closed_form,
    w_csv,
    weyl_gauge,
)
from app.projective.core.connections import gauss_curvature, weyl_connection_form, weyl_schouten
from app.projective.core.errors import ArgumentError, InvalidElementError
from app.projective.core.fields import (
    MetricField,
    OneFormField,
    ScalarField,
    exterior_derivative,
    frame_components,
    hodge_star,
    orthonormal_coframe,
    sample_grid,
)
from app.projective.core.models import NORTH, random_weyl_pair, round_sphere
from app.projective.core.utilities import make_rng, observed_order, sup_norm

EUCLIDEAN = MetricField(lambda u, v: (1.0, 0.0, 1.0))
ZERO = OneFormField(lambda u, v: (0.0, 0.0))
INTERIOR = sample_grid("plane", 21, box=(-0.8, 0.8))
SMALL = sample_grid("plane", 9, box=(-0.8, 0.8))


def random_element(rng, b_max=0.5):
    a = expm(0.4 * rng.normal(size=(2, 2)))
    b = rng.normal(size=2)
    b *= b_max * rng.uniform() / np.linalg.norm(b)
    return GroupElement(a=a, b=b)


def relative(values, reference):
    return sup_norm(values - reference) / max(sup_norm(reference), 1e-12)


# ---------------------------
# Gruppo di struttura
# ---------------------------

class TestGroup:
    def test_identity_is_neutral(self):
        element = random_element(make_rng(1))
        product = group_mul(identity_element(), element)
        assert_allclose(product.a, element.a)
        assert_allclose(product.b, element.b)

    def test_top_left_entry(self):
        rng = make_rng(2)
        first, second = random_element(rng), random_element(rng)
        product = group_mul(first, second).matrix()
        assert product[0, 0] == pytest.approx(1.0 / np.linalg.det(first.a @ second.a), rel=1e-12)
        assert np.linalg.det(product) == pytest.approx(1.0, abs=1e-12)

    def test_closure_matches_matrix_product(self):
        rng = make_rng(3)
        for _ in range(50):
            first, second = random_element(rng), random_element(rng)
            assert sup_norm(group_mul(first, second).matrix() - first.matrix() @ second.matrix()) < 1e-12

    def test_inverse(self):
        element = random_element(make_rng(4))
        assert_allclose(group_mul(element, group_inverse(element)).matrix(), np.eye(3), atol=1e-12)

    def test_from_matrix_roundtrip(self):
        element = random_element(make_rng(5))
        rebuilt = GroupElement.from_matrix(element.matrix())
        assert_allclose(rebuilt.a, element.a)
        assert_allclose(rebuilt.b, element.b)

    def test_negative_determinant_rejected(self):
        with pytest.raises(InvalidElementError):
            GroupElement(a=[[1.0, 0.0], [0.0, -1.0]], b=[0.0, 0.0])

    def test_from_matrix_rejects_bad_corner(self):
        matrix = identity_element().matrix()
        matrix[0, 0] = 2.0
        with pytest.raises(InvalidElementError):
            GroupElement.from_matrix(matrix)

    def test_complex_element(self):
        element = element_from_complex(0.3 - 0.2j, 2.0, np.pi / 2)
        assert_allclose(element.a, [[0.0, 2.0], [-2.0, 0.0]], atol=1e-15)
        assert_allclose(element.b, [0.3, -0.2])
        with pytest.raises(InvalidElementError):
            element_from_complex(0j, 0.0, 0.0)


# ---------------------------
# 2-getti
# ---------------------------

class TestTwoJets:
    def test_identity_jet(self):
        jet = two_jet_of_fab(identity_element())
        assert_allclose(jet.value, 0.0)
        assert_allclose(jet.jacobian, np.eye(2))
        assert_allclose(jet.hessian, 0.0)

    def test_linear_element(self):
        a = np.array([[2.0, 0.5], [0.0, 1.0]])
        jet = two_jet_of_fab(GroupElement(a=a, b=np.zeros(2)))
        assert_allclose(jet.jacobian, 2.0 * a)
        assert_allclose(jet.hessian, 0.0)

    def test_hessian_symmetry(self):
        jet = two_jet_of_fab(random_element(make_rng(6)))
        assert_allclose(jet.hessian, np.swapaxes(jet.hessian, 1, 2), atol=1e-15)

    def test_finite_difference_oracle(self):
        rng = make_rng(7)
        for _ in range(10):
            element = random_element(rng)
            oracle = finite_difference_jet(lambda x: fab(element, x))
            assert jet_distance(two_jet_of_fab(element), oracle) < 1e-6

    def test_homomorphism_identity(self):
        assert jet_homomorphism_check(random_element(make_rng(8)), identity_element()) == pytest.approx(0.0, abs=1e-15)

    def test_homomorphism_linear(self):
        rng = make_rng(9)
        first = GroupElement(a=expm(0.3 * rng.normal(size=(2, 2))), b=np.zeros(2))
        second = GroupElement(a=expm(0.3 * rng.normal(size=(2, 2))), b=np.zeros(2))
        assert jet_homomorphism_check(first, second) < 1e-12

    def test_homomorphism_random_pairs(self):
        rng = make_rng(42)
        worst = max(jet_homomorphism_check(random_element(rng), random_element(rng)) for _ in range(100))
        assert worst < 1e-9

    def test_compose_requires_fixed_point(self):
        jet = two_jet_of_fab(identity_element())
        moved = jet.model_copy(update={"value": np.array([1.0, 0.0])})
        with pytest.raises(ArgumentError):
            compose_jets(jet, moved)


# ---------------------------
# Gauge di Weyl e theta generale
# ---------------------------

class TestWeylGauge:
    def test_round_sphere_top_row(self):
        _, metrics = round_sphere()
        g = metrics[NORTH]
        grid = sample_grid(NORTH, 9, box=(-1.0, 1.0))
        theta = weyl_gauge(g, OneFormField(lambda u, v: (0.0, 0.0), NORTH))(*grid)
        e = orthonormal_coframe(g)(*grid)
        assert sup_norm(theta[..., 0, 1, :] + e[..., 0, :]) < 1e-4
        assert sup_norm(theta[..., 0, 2, :] + e[..., 1, :]) < 1e-4

    def test_euclidean_is_flat_model(self):
        theta = weyl_gauge(EUCLIDEAN, ZERO)(*SMALL)
        assert sup_norm(theta[..., 0, :, :]) == 0.0
        assert sup_norm(theta[..., 1:, 1:, :]) == 0.0
        assert_allclose(theta[..., 1:, 0, :], np.broadcast_to(np.eye(2), SMALL[0].shape + (2, 2)))

    def test_lower_block_is_connection_form(self):
        g, beta = random_weyl_pair(make_rng(10))
        theta = weyl_gauge(g, beta)(*SMALL)
        zeta = weyl_connection_form(g, beta)(*SMALL)
        block = theta[..., 1:, 1:, :] - np.einsum("ij,...c->...ijc", np.eye(2), theta[..., 0, 0, :])
        assert sup_norm(block - zeta) < 1e-8

    def test_trace_free(self):
        g, beta = random_weyl_pair(make_rng(11))
        assert weyl_gauge(g, beta).trace_defect(*INTERIOR) < 1e-10

    def test_general_theta_reduces_to_weyl_gauge(self):
        g, beta = random_weyl_pair(make_rng(12))
        general = theta_general(weyl_connection_form(g, beta), weyl_schouten(g, beta), None, orthonormal_coframe(g))
        assert sup_norm(general(*SMALL) - weyl_gauge(g, beta)(*SMALL)) < 1e-12

    def test_constant_section_on_flat_data(self):
        xi = SectionField(lambda u, v: (0.3, -0.2))
        theta = theta_general(weyl_connection_form(EUCLIDEAN, ZERO), weyl_schouten(EUCLIDEAN, ZERO), xi,
                              orthonormal_coframe(EUCLIDEAN))(0.1, 0.4)
        xi_eta = np.array([0.3, -0.2])
        assert_allclose(theta[0, 0], -xi_eta, atol=1e-15)
        assert_allclose(theta[0, 1], -0.3 * xi_eta, atol=1e-15)
        assert_allclose(theta[0, 2], 0.2 * xi_eta, atol=1e-15)
        assert_allclose(theta[1, 1], [0.3, 0.0], atol=1e-15)
        assert_allclose(theta[2, 1], [0.0, 0.3], atol=1e-15)

    def test_section_keeps_curvature_shape(self):
        g, beta = random_weyl_pair(make_rng(13))
        xi = SectionField(lambda u, v: (0.2 * np.sin(u + v), 0.1 * np.cos(2 * v)))
        theta = theta_general(weyl_connection_form(g, beta), weyl_schouten(g, beta), xi, orthonormal_coframe(g))
        assert structure_residual(theta, INTERIOR).shape_defect < 1e-4


# ---------------------------
# Equazioni di struttura e funzioni W
# ---------------------------

class TestStructureResidual:
    def test_euclidean_vanishes(self):
        curvature = structure_residual(weyl_gauge(EUCLIDEAN, ZERO), SMALL)
        assert sup_norm(curvature.omega) < 1e-12

    def test_round_sphere_is_flat(self):
        _, metrics = round_sphere()
        grid = sample_grid(NORTH, 21, box=(-1.0, 1.0))
        theta = weyl_gauge(metrics[NORTH], OneFormField(lambda u, v: (0.0, 0.0), NORTH), 1e-5, 1e-3)
        curvature = structure_residual(theta, grid, 1e-3)
        assert curvature.shape_defect < 1e-4
        assert max(sup_norm(curvature.w1), sup_norm(curvature.w2)) < 1e-4

    def test_two_pipelines_agree(self):
        g, beta = random_weyl_pair(make_rng(14))
        curvature = structure_residual(weyl_gauge(g, beta), INTERIOR)
        w1, w2 = w_closed_form(g, beta)
        assert relative(curvature.w1, w1(*INTERIOR)) < 1e-3
        assert relative(curvature.w2, w2(*INTERIOR)) < 1e-3

    def test_shape_defect_order(self):
        g, beta = random_weyl_pair(make_rng(15))
        theta = weyl_gauge(g, beta)
        errors = [structure_residual(theta, SMALL, step).shape_defect for step in (4e-2, 2e-2, 1e-2)]
        assert observed_order(errors) >= 1.9

    def test_closed_form_without_beta(self):
        g, _ = random_weyl_pair(make_rng(16))
        w1, w2 = w_closed_form(g, ZERO, h_structure=1e-3)
        K = gauss_curvature(g)
        expected = frame_components(-hodge_star(exterior_derivative(K, 1e-3), g)(*SMALL), orthonormal_coframe(g)(*SMALL))
        assert_allclose(w1(*SMALL), expected[..., 0], atol=1e-12)
        assert_allclose(w2(*SMALL), expected[..., 1], atol=1e-12)

    def test_closed_form_constant_curvature(self):
        w1, w2 = w_closed_form(EUCLIDEAN, ZERO)
        assert sup_norm(w1(*SMALL)) == 0.0
        assert sup_norm(w2(*SMALL)) == 0.0

    def test_rho_beta_term_sign(self):
        # beta = a(-v/2, u/2): d beta = a du^dv, delta beta = 0, quindi W = +2/3 a beta.
        a = 0.6
        beta = OneFormField(lambda u, v: (-0.5 * a * v, 0.5 * a * u))
        w1, w2 = w_closed_form(EUCLIDEAN, beta)
        U, V = SMALL
        assert_allclose(w1(U, V), -a * a * V / 3.0, atol=1e-6)
        assert_allclose(w2(U, V), a * a * U / 3.0, atol=1e-6)

    def test_weyl_rescaling_law(self):
        g, beta = random_weyl_pair(make_rng(17))
        weight = ScalarField(lambda u, v: 0.3 * np.sin(u + 0.5 * v))
        scaled = MetricField(lambda u, v: np.exp(2.0 * weight(u, v))[..., None] * g(u, v))
        d_weight = exterior_derivative(weight)
        shifted = OneFormField(lambda u, v: beta(u, v) + d_weight(u, v))
        w1, w2 = w_closed_form(g, beta)
        w1s, w2s = w_closed_form(scaled, shifted)
        factor = np.exp(-3.0 * weight(*INTERIOR))
        assert relative(w1s(*INTERIOR), factor * w1(*INTERIOR)) < 1e-3
        assert relative(w2s(*INTERIOR), factor * w2(*INTERIOR)) < 1e-3

    def test_rotation_covariance(self):
        g, beta = random_weyl_pair(make_rng(18))
        assert gauge_transform_rotation_check(weyl_gauge(g, beta), 0.7, SMALL) < 1e-6

    def test_w_csv(self, tmp_path):
        path = tmp_path / "w.csv"
        w_csv(structure_residual(weyl_gauge(EUCLIDEAN, ZERO), SMALL), str(path))
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["u", "v", "W1", "W2"]
        assert len(rows) == 82


# ---------------------------
# Trasformazioni di gauge e forma complessa
# ---------------------------

class TestGaugeTransform:
    def test_identity(self):
        g, beta = random_weyl_pair(make_rng(19))
        theta = weyl_gauge(g, beta)
        assert sup_norm(gauge_transform(theta, identity_element())(*SMALL) - theta(*SMALL)) == 0.0

    def test_omega1_scaling(self):
        g, beta = random_weyl_pair(make_rng(20))
        theta = weyl_gauge(g, beta)
        r, phi = 1.3, 0.4
        element = element_from_complex(0.3 - 0.2j, r, phi)
        before = complexify(theta, SMALL).omega1(*SMALL)
        after = complexify(gauge_transform(theta, element), SMALL).omega1(*SMALL)
        assert sup_norm(np.abs(after - np.exp(1j * phi) / r ** 3 * before)) < 1e-8

    def test_omega2_rotation(self):
        g, beta = random_weyl_pair(make_rng(21))
        xi = SectionField(lambda u, v: (0.2 * np.sin(u), 0.1 * np.cos(v)))
        theta = theta_general(weyl_connection_form(g, beta), weyl_schouten(g, beta), xi, orthonormal_coframe(g))
        phi = 0.4
        before = complexify(theta, SMALL).omega2(*SMALL)
        after = complexify(gauge_transform(theta, element_from_complex(0j, 1.3, phi)), SMALL).omega2(*SMALL)
        assert sup_norm(np.abs(after - np.exp(2j * phi) * before)) < 1e-8

    def test_varying_gauge_keeps_flatness(self):
        def sampler(u, v):
            det = 1.0 + 0.2 * np.sin(u)
            out = np.zeros(np.shape(u) + (3, 3))
            out[..., 0, 0] = 1.0 / det
            out[..., 0, 1] = 0.1 * np.cos(v)
            out[..., 0, 2] = 0.2 * u
            out[..., 1, 1] = det
            out[..., 1, 2] = 0.1 * v
            out[..., 2, 2] = 1.0
            return out

        theta = gauge_transform(weyl_gauge(EUCLIDEAN, ZERO), GroupElementField(sampler))
        assert theta.trace_defect(*SMALL) < 1e-8
        assert sup_norm(structure_residual(theta, SMALL).omega) < 1e-5


class TestComplexify:
    def test_omega2_vanishes_in_weyl_gauge(self):
        g, beta = random_weyl_pair(make_rng(22))
        structure = complexify(weyl_gauge(g, beta), SMALL)
        assert sup_norm(np.abs(structure.omega2(*SMALL))) == 0.0

    def test_round_sphere_residuals(self):
        _, metrics = round_sphere()
        grid = sample_grid(NORTH, 11, box=(-1.0, 1.0))
        theta = weyl_gauge(metrics[NORTH], OneFormField(lambda u, v: (0.0, 0.0), NORTH), 1e-5, 1e-3)
        assert max(complexify(theta, grid).sup_residuals().values()) < 1e-4

    def test_random_corpus_residuals(self):
        g, beta = random_weyl_pair(make_rng(23))
        assert max(complexify(weyl_gauge(g, beta), INTERIOR).sup_residuals().values()) < 1e-4

    def test_first_residual_is_complex_curvature(self):
        g, beta = random_weyl_pair(make_rng(24))
        structure = complexify(weyl_gauge(g, beta), SMALL)
        omega = structure.curvature.omega
        assert sup_norm(np.abs(structure.residuals["r1"] - (omega[..., 1, 0] + 1j * omega[..., 2, 0]))) < 1e-10
