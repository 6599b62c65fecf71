import csv
import logging
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.projective.core.connections import (
    SchoutenMatrix,
    gauss_curvature,
    levi_civita_form,
)
from app.projective.core.errors import ArgumentError, GeometryError, InvalidElementError, ReportIOError
from app.projective.core.fields import (
    CoframeField,
    FormMatrix,
    MetricField,
    OneFormField,
    SampledField,
    ScalarField,
    central_partials,
    central_stencil,
    codifferential,
    exterior_derivative,
    exterior_derivative_oneform,
    frame_components,
    hodge_star,
    orthonormal_coframe,
    sample_grid,
    star_twoform,
)
from app.projective.core.utilities import projective_config, sup_norm

logger = logging.getLogger(__name__)


# --------------------------- Gruppo G e 2-getti ---------------------------

class GroupElement(BaseModel):
    """
    Elemento b⋊a del gruppo di struttura G ⊂ SL(3,R).

    Forma matriciale: ((det a)^{-1}, b; 0, a), con det a > 0.

    Attributes:
        a (np.ndarray): Blocco lineare 2x2.
        b (np.ndarray): Vettore riga di lunghezza 2.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    a: np.ndarray = Field(..., description="Blocco 2x2 con det a > 0")
    b: np.ndarray = Field(..., description="Vettore riga (b1, b2)")

    @field_validator("a", mode="before")
    def check_a(cls, value):
        arr = np.asarray(value, dtype=float)
        if arr.shape != (2, 2) or not np.all(np.isfinite(arr)):
            raise InvalidElementError("Il blocco a deve essere una matrice 2x2 finita")
        if np.linalg.det(arr) <= 0.0:
            raise InvalidElementError(f"Elemento non valido: det a = {np.linalg.det(arr):.3e} <= 0")
        return arr

    @field_validator("b", mode="before")
    def check_b(cls, value):
        arr = np.asarray(value, dtype=float)
        if arr.shape != (2,) or not np.all(np.isfinite(arr)):
            raise InvalidElementError("Il vettore b deve avere due componenti finite")
        return arr

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.a))

    def matrix(self) -> np.ndarray:
        out = np.zeros((3, 3))
        out[0, 0] = 1.0 / self.det
        out[0, 1:] = self.b
        out[1:, 1:] = self.a
        return out

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, tol: float = 1e-10) -> "GroupElement":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (3, 3) or np.max(np.abs(matrix[1:, 0])) > tol:
            raise InvalidElementError("La matrice non ha la forma a blocchi di G")
        element = cls(a=matrix[1:, 1:], b=matrix[0, 1:])
        if abs(matrix[0, 0] * element.det - 1.0) > tol:
            raise InvalidElementError("L'entrata (0,0) non coincide con (det a)^{-1}")
        return element


def identity_element() -> GroupElement:
    return GroupElement(a=np.eye(2), b=np.zeros(2))


def element_from_complex(z: complex, r: float, phi: float) -> GroupElement:
    """Elemento z⋊re^{i phi} del sottogruppo H = R^2 ⋊ CO(2)."""
    if r <= 0.0:
        raise InvalidElementError("Il fattore di scala r deve essere positivo")
    c, s = np.cos(phi), np.sin(phi)
    return GroupElement(a=r * np.array([[c, s], [-s, c]]), b=np.array([z.real, z.imag]))


def group_mul(first: GroupElement, second: GroupElement) -> GroupElement:
    """
    Prodotto in G per blocchi: a = a1 a2, b = (det a1)^{-1} b2 + b1 a2.

    Args:
        first, second (GroupElement): Fattori (sinistro, destro).

    Returns:
        GroupElement: Il prodotto, che coincide con il prodotto delle matrici 3x3.
    """
    return GroupElement(a=first.a @ second.a, b=second.b / first.det + first.b @ second.a)


def group_inverse(element: GroupElement) -> GroupElement:
    a_inv = np.linalg.inv(element.a)
    return GroupElement(a=a_inv, b=-element.det * element.b @ a_inv)


class TwoJet(BaseModel):
    """2-getto in 0 di una mappa R^2 -> R^2: valore, jacobiano, hessiano H[i, j, k]."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: np.ndarray = Field(..., description="Valore in 0")
    jacobian: np.ndarray = Field(..., description="Jacobiano 2x2")
    hessian: np.ndarray = Field(..., description="Hessiano 2x2x2 simmetrico negli ultimi due indici")


def fab(element: GroupElement, x: np.ndarray) -> np.ndarray:
    """Trasformazione frazionaria lineare f_{a,b}(x) = (det a) a x / (1 + (det a) b.x)."""
    x = np.asarray(x, dtype=float)
    d = element.det
    return d * np.einsum("ij,...j->...i", element.a, x) / (1.0 + d * (x @ element.b))[..., None]


def two_jet_of_fab(element: GroupElement) -> TwoJet:
    """2-getto esatto di f_{a,b} in 0: jacobiano (det a) a, hessiano -(det a)^2 (a_ij b_k + a_ik b_j)."""
    d = element.det
    a, b = element.a, element.b
    hessian = -d * d * (np.einsum("ij,k->ijk", a, b) + np.einsum("ik,j->ijk", a, b))
    return TwoJet(value=np.zeros(2), jacobian=d * a, hessian=hessian)


def compose_jets(outer: TwoJet, inner: TwoJet) -> TwoJet:
    """Regola della catena al secondo ordine per getti che fissano 0."""
    if np.max(np.abs(inner.value)) > 0.0:
        raise ArgumentError("Il getto interno deve fissare l'origine")
    jacobian = outer.jacobian @ inner.jacobian
    hessian = (np.einsum("ilm,lj,mk->ijk", outer.hessian, inner.jacobian, inner.jacobian)
               + np.einsum("il,ljk->ijk", outer.jacobian, inner.hessian))
    return TwoJet(value=outer.value.copy(), jacobian=jacobian, hessian=hessian)


def jet_distance(first: TwoJet, second: TwoJet) -> float:
    return max(sup_norm(first.value - second.value),
               sup_norm(first.jacobian - second.jacobian),
               sup_norm(first.hessian - second.hessian))


def jet_homomorphism_check(first: GroupElement, second: GroupElement) -> float:
    """Residuo tra j(f_{g1 g2}) e j(f_{g1}) composto con j(f_{g2})."""
    product = two_jet_of_fab(group_mul(first, second))
    composed = compose_jets(two_jet_of_fab(first), two_jet_of_fab(second))
    return jet_distance(product, composed)


def finite_difference_jet(fn: Callable[[np.ndarray], np.ndarray], step: float = 1e-4) -> TwoJet:
    """2-getto in 0 di una mappa esplicita per differenze centrali (oracolo di test)."""
    basis = np.eye(2)
    value = fn(np.zeros(2))
    jacobian = np.zeros((2, 2))
    hessian = np.zeros((2, 2, 2))
    for j in range(2):
        jacobian[:, j] = (fn(step * basis[j]) - fn(-step * basis[j])) / (2.0 * step)
        for k in range(2):
            hessian[:, j, k] = (fn(step * (basis[j] + basis[k])) - fn(step * (basis[j] - basis[k]))
                                - fn(step * (basis[k] - basis[j])) + fn(-step * (basis[j] + basis[k]))) / (4.0 * step ** 2)
    return TwoJet(value=value, jacobian=jacobian, hessian=hessian)


# --------------------------- Connessioni di Cartan ---------------------------

class CartanGauge(FormMatrix):
    """Connessione di Cartan sl(3,R)-valutata in un gauge di carta: campionatore (..., 3, 3, 2)."""
    kind = "cartan"

    def __init__(self, sampler: Callable, chart_id: str = "plane"):
        super().__init__(sampler, 3, chart_id)

    def trace_defect(self, u, v) -> float:
        return sup_norm(np.einsum("...iic->...c", self(u, v)))


class SectionField(SampledField):
    """Sezione xi = (xi_1, xi_2) di funzioni (fibra R_2)."""
    value_shape = (2,)
    kind = "section"


class GroupElementField(SampledField):
    """Campo a valori in G, dato come matrici 3x3."""
    value_shape = (3, 3)
    kind = "group"


def constant_group_field(element: GroupElement, chart_id: str = "plane") -> GroupElementField:
    matrix = element.matrix()
    return GroupElementField(lambda u, v: np.broadcast_to(matrix, np.shape(u) + (3, 3)), chart_id)


def _assemble_theta(theta00, theta0j, theta_i0, theta_ij) -> np.ndarray:
    shape = theta00.shape[:-1]
    out = np.empty(shape + (3, 3, 2))
    out[..., 0, 0, :] = theta00
    out[..., 0, 1:, :] = theta0j
    out[..., 1:, 0, :] = theta_i0
    out[..., 1:, 1:, :] = theta_ij
    return out


def weyl_gauge(g: MetricField, beta: OneFormField, h: Optional[float] = None,
               h_gamma: Optional[float] = None, orientation: Optional[int] = None) -> CartanGauge:
    """
    Connessione di Cartan nel gauge di Weyl (xi = 0) della coppia (g, beta).

    Args:
        g (MetricField): Metrica definita positiva.
        beta (OneFormField): 1-forma della connessione conforme.

    Returns:
        CartanGauge: theta con righe
            (2/3 beta, (delta beta - K) eta1 + 1/3 (*d beta) eta2, -1/3 (*d beta) eta1 + (delta beta - K) eta2),
            (eta1, -1/3 beta, *beta - phi),
            (eta2, phi - *beta, -1/3 beta).
    """
    coframe = orthonormal_coframe(g)
    phi = levi_civita_form(g, h)
    K = gauss_curvature(g, h_gamma)
    delta_beta = codifferential(beta, g, orientation, h)
    rho = star_twoform(exterior_derivative_oneform(beta, h), g, orientation)
    star_beta = hodge_star(beta, g, orientation)

    def sampler(u, v):
        e = coframe(u, v)
        eta1, eta2 = e[..., 0, :], e[..., 1, :]
        b = beta(u, v)
        k = (delta_beta(u, v) - K(u, v))[..., None]
        r = (rho(u, v) / 3.0)[..., None]
        rotation = star_beta(u, v) - phi(u, v)
        theta0j = np.stack([k * eta1 + r * eta2, -r * eta1 + k * eta2], axis=-2)
        theta_ij = np.stack([np.stack([-b / 3.0, rotation], axis=-2),
                             np.stack([-rotation, -b / 3.0], axis=-2)], axis=-3)
        return _assemble_theta(2.0 * b / 3.0, theta0j, e, theta_ij)

    return CartanGauge(sampler, g.chart_id)


def theta_general(zeta: FormMatrix, S: SchoutenMatrix, xi: Optional[SampledField], coframe: CoframeField,
                  h: Optional[float] = None) -> CartanGauge:
    """
    Connessione di Cartan lungo la sezione x -> (coframe(x), xi(x)):

        theta00 = -1/3 tr zeta - xi eta
        theta0j = d xi_j - (xi zeta)_j - (S^t eta)_j - (xi eta) xi_j
        thetai0 = eta^i
        thetaij = zeta^i_j - 1/3 delta_ij tr zeta + eta^i xi_j
    """
    h = h or projective_config.h
    if xi is None:
        xi = SectionField(lambda u, v: np.zeros(np.shape(u) + (2,)), coframe.chart_id)

    def sampler(u, v):
        Z = zeta(u, v)
        e = coframe(u, v)
        s = S(u, v)
        x = xi(u, v)
        x_u, x_v = central_partials(xi, u, v, h)
        d_xi = np.stack([x_u, x_v], axis=-1)
        tr_zeta = Z[..., 0, 0, :] + Z[..., 1, 1, :]
        xi_eta = np.einsum("...i,...ic->...c", x, e)
        theta0j = (d_xi
                   - np.einsum("...i,...ijc->...jc", x, Z)
                   - np.einsum("...ij,...ic->...jc", s, e)
                   - xi_eta[..., None, :] * x[..., :, None])
        theta_ij = (Z
                    - np.einsum("ij,...c->...ijc", np.eye(2), tr_zeta) / 3.0
                    + np.einsum("...ic,...j->...ijc", e, x))
        return _assemble_theta(-tr_zeta / 3.0 - xi_eta, theta0j, e, theta_ij)

    return CartanGauge(sampler, coframe.chart_id)


def gauge_transform(theta: CartanGauge, element: Union[GroupElement, GroupElementField],
                    h: Optional[float] = None) -> CartanGauge:
    """theta' = h^{-1} theta h + h^{-1} dh; per h costante il termine di Maurer-Cartan si annulla."""
    h = h or projective_config.h
    field = constant_group_field(element, theta.chart_id) if isinstance(element, GroupElement) else element

    def sampler(u, v):
        H, H_u, H_v = central_stencil(field, u, v, h)
        H_inv = np.linalg.inv(H)
        T = theta(u, v)
        parts = [H_inv @ T[..., c] @ H + H_inv @ d_H for c, d_H in enumerate((H_u, H_v))]
        return np.stack(parts, axis=-1)

    return CartanGauge(sampler, theta.chart_id)


# --------------------------- Curvatura ---------------------------

class CurvatureResidual(BaseModel):
    """
    Curvatura d theta + theta^theta campionata su una griglia.

    Attributes:
        omega: densità (..., 3, 3) delle nove 2-forme.
        w1, w2: funzioni di piattezza lette dalle entrate (0,1), (0,2) divise per eta1^eta2.
        shape_defect: sup delle altre sette entrate.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray = Field(..., description="Griglia in u")
    v: np.ndarray = Field(..., description="Griglia in v")
    omega: np.ndarray = Field(..., description="Densità di d theta + theta^theta")
    area: np.ndarray = Field(..., description="Densità di eta1^eta2")
    w1: np.ndarray = Field(..., description="W1 sui campioni")
    w2: np.ndarray = Field(..., description="W2 sui campioni")
    shape_defect: float = Field(..., description="Sup delle entrate fuori da (0,1), (0,2)")

    @property
    def W1(self) -> np.ndarray:
        return self.w1

    @property
    def W2(self) -> np.ndarray:
        return self.w2


OFF_SHAPE = np.ones((3, 3), dtype=bool)
OFF_SHAPE[0, 1] = OFF_SHAPE[0, 2] = False


def _curvature_arrays(theta: CartanGauge, u, v, h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    values = theta(u, v)
    omega = theta.exterior_derivative(h)(u, v) + theta.wedge_self(u, v)
    eta1 = values[..., 1, 0, :]
    eta2 = values[..., 2, 0, :]
    area = eta1[..., 0] * eta2[..., 1] - eta1[..., 1] * eta2[..., 0]
    floor = projective_config.density_floor
    if not np.all(area > floor):
        raise GeometryError(f"Densità eta1^eta2 sotto la soglia {floor:.1e}: impossibile estrarre W")
    return values, omega, area


def structure_residual(theta: CartanGauge, grid=None, h: Optional[float] = None) -> CurvatureResidual:
    """
    Equazioni di struttura d theta + theta^theta su una griglia.

    Args:
        theta (CartanGauge): Connessione di Cartan in un gauge di carta.
        grid: Coppia (U, V); default la griglia interna della carta.
        h (float): Passo esterno delle differenze centrali.

    Returns:
        CurvatureResidual
    """
    h = h or projective_config.h_structure
    U, V = grid if grid is not None else sample_grid(theta.chart_id, projective_config.interior_grid)
    _, omega, area = _curvature_arrays(theta, U, V, h)
    shape_defect = sup_norm(omega[..., OFF_SHAPE])
    logger.debug("structure_residual: griglia %s, shape_defect %.3e", U.shape, shape_defect)
    return CurvatureResidual(u=U, v=V, omega=omega, area=area, w1=omega[..., 0, 1] / area,
                             w2=omega[..., 0, 2] / area, shape_defect=shape_defect)


def flatness_functions(theta: CartanGauge, h: Optional[float] = None) -> Tuple[ScalarField, ScalarField]:
    """W1, W2 come campi scalari pigri."""
    h = h or projective_config.h_structure

    def component(index: int) -> ScalarField:
        def sampler(u, v):
            _, omega, area = _curvature_arrays(theta, u, v, h)
            return omega[..., 0, index] / area
        return ScalarField(sampler, theta.chart_id)

    return component(1), component(2)


def w_closed_form(g: MetricField, beta: OneFormField, h: Optional[float] = None, h_gamma: Optional[float] = None,
                  h_structure: Optional[float] = None) -> Tuple[ScalarField, ScalarField]:
    """
    Funzioni di piattezza in forma chiusa, come coefficienti di frame della 1-forma

        -*d(K - delta beta) + 1/3 d(*d beta) - 2 (K - delta beta) *beta + 2/3 (*d beta) beta.

    Returns:
        (W1, W2) come campi scalari.
    """
    h_structure = h_structure or projective_config.h_structure
    K = gauss_curvature(g, h_gamma)
    delta_beta = codifferential(beta, g, h=h)
    rho = star_twoform(exterior_derivative_oneform(beta, h), g)
    k = ScalarField(lambda u, v: K(u, v) - delta_beta(u, v), g.chart_id)
    star_dk = hodge_star(exterior_derivative(k, h_structure), g)
    d_rho = exterior_derivative(rho, h_structure)
    star_beta = hodge_star(beta, g)
    coframe = orthonormal_coframe(g)

    # Convenzioni: *eta1 = eta2, rho = *d beta = (d beta)_12 in frame. Sotto (g, beta) -> (e^{2u} g, beta + du)
    # rho e k prendono il fattore e^{-2u} e 1/3 d rho genera -2/3 rho du: solo +2/3 rho beta lo compensa,
    # quindi il segno dell'ultimo termine è quello che rende W covariante di peso -3.
    def frame(u, v):
        w = (-star_dk(u, v) + d_rho(u, v) / 3.0
             - 2.0 * k(u, v)[..., None] * star_beta(u, v)
             + 2.0 * rho(u, v)[..., None] * beta(u, v) / 3.0)
        return frame_components(w, coframe(u, v))

    return ScalarField(lambda u, v: frame(u, v)[..., 0], g.chart_id), ScalarField(lambda u, v: frame(u, v)[..., 1], g.chart_id)


def gauge_transform_rotation_check(theta: CartanGauge, phi: float, grid=None, h: Optional[float] = None) -> float:
    """
    Covarianza di W sotto una rotazione costante: (W1', W2') = (W1, W2) a.

    Returns:
        float: residuo sup-norm.
    """
    element = element_from_complex(0j, 1.0, phi)
    before = structure_residual(theta, grid, h)
    after = structure_residual(gauge_transform(theta, element), grid, h)
    expected = np.stack([before.w1, before.w2], axis=-1) @ element.a
    return max(sup_norm(after.w1 - expected[..., 0]), sup_norm(after.w2 - expected[..., 1]))


def w_csv(residual: CurvatureResidual, path: str) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["u", "v", "W1", "W2"])
            for u, v, w1, w2 in zip(residual.u.ravel(), residual.v.ravel(), residual.w1.ravel(), residual.w2.ravel()):
                writer.writerow([format(u, ".17g"), format(v, ".17g"), format(w1, ".17g"), format(w2, ".17g")])
    except OSError as e:
        raise ReportIOError("Errore nella scrittura di W: " + str(e))


# --------------------------- Forma complessa ---------------------------

class ComplexForm:
    """1-forma complessa memorizzata come coppia di 1-forme reali."""

    def __init__(self, re: OneFormField, im: OneFormField):
        self.re = re
        self.im = im

    def __call__(self, u, v) -> np.ndarray:
        return self.re(u, v) + 1j * self.im(u, v)


class ComplexStructure(BaseModel):
    """Forme complesse della connessione di Cartan e residui delle quattro equazioni di struttura."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    omega1: ComplexForm
    omega2: ComplexForm
    xi: ComplexForm
    psi: ComplexForm
    residuals: Dict[str, np.ndarray] = Field(..., description="Densità complesse dei residui r1..r4")
    curvature: CurvatureResidual

    def sup_residuals(self) -> Dict[str, float]:
        return {name: sup_norm(np.abs(value)) for name, value in self.residuals.items()}


def _cwedge(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    return first[..., 0] * second[..., 1] - first[..., 1] * second[..., 0]


def complexify(theta: CartanGauge, grid=None, h: Optional[float] = None) -> ComplexStructure:
    """
    omega1 = theta10 + i theta20, omega2 = (theta11 - theta22) + i (theta12 + theta21),
    xi = theta01 + i theta02, psi = -1/2 (3 theta00 + i (theta12 - theta21)),
    con i residui delle equazioni di struttura in forma complessa e W = 1/2 (W2 - i W1).
    """
    h = h or projective_config.h_structure
    chart = theta.chart_id
    omega1 = ComplexForm(theta.entry(1, 0), theta.entry(2, 0))
    omega2 = ComplexForm(OneFormField(lambda u, v: theta(u, v)[..., 1, 1, :] - theta(u, v)[..., 2, 2, :], chart),
                         OneFormField(lambda u, v: theta(u, v)[..., 1, 2, :] + theta(u, v)[..., 2, 1, :], chart))
    xi = ComplexForm(theta.entry(0, 1), theta.entry(0, 2))
    psi = ComplexForm(OneFormField(lambda u, v: -1.5 * theta(u, v)[..., 0, 0, :], chart),
                      OneFormField(lambda u, v: -0.5 * (theta(u, v)[..., 1, 2, :] - theta(u, v)[..., 2, 1, :]), chart))

    curvature = structure_residual(theta, grid, h)
    U, V = curvature.u, curvature.v
    T = theta(U, V)
    dT = theta.exterior_derivative(h)(U, V)

    w1 = T[..., 1, 0, :] + 1j * T[..., 2, 0, :]
    w2 = (T[..., 1, 1, :] - T[..., 2, 2, :]) + 1j * (T[..., 1, 2, :] + T[..., 2, 1, :])
    x = T[..., 0, 1, :] + 1j * T[..., 0, 2, :]
    p = -0.5 * (3.0 * T[..., 0, 0, :] + 1j * (T[..., 1, 2, :] - T[..., 2, 1, :]))
    d_w1 = dT[..., 1, 0] + 1j * dT[..., 2, 0]
    d_w2 = (dT[..., 1, 1] - dT[..., 2, 2]) + 1j * (dT[..., 1, 2] + dT[..., 2, 1])
    d_x = dT[..., 0, 1] + 1j * dT[..., 0, 2]
    d_p = -0.5 * (3.0 * dT[..., 0, 0] + 1j * (dT[..., 1, 2] - dT[..., 2, 1]))
    W = 0.5 * (curvature.w2 - 1j * curvature.w1)

    residuals = {
        "r1": d_w1 - _cwedge(w1, p) - 0.5 * _cwedge(np.conj(w1), w2),
        "r2": d_w2 + _cwedge(w1, x) - _cwedge(w2, p) - _cwedge(np.conj(p), w2),
        "r3": d_x - W * _cwedge(np.conj(w1), w1) + 0.5 * _cwedge(np.conj(x), w2) - _cwedge(np.conj(p), x),
        "r4": d_p + 0.5 * _cwedge(np.conj(w1), x) - 0.25 * _cwedge(np.conj(w2), w2) - _cwedge(np.conj(x), w1),
    }
    return ComplexStructure(omega1=omega1, omega2=omega2, xi=xi, psi=psi, residuals=residuals, curvature=curvature)
