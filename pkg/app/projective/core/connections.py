import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.projective.core.fields import (
    EPSILON,
    CoframeField,
    FormMatrix,
    MetricField,
    OneFormField,
    SampledField,
    ScalarField,
    central_stencil,
    checked_inverse,
    cholesky_coframe,
    codifferential,
    exterior_derivative_oneform,
    from_frame,
    hodge_star,
    orthonormal_coframe,
    sample_grid,
    star_twoform,
)
from app.projective.core.utilities import projective_config, sup_norm

logger = logging.getLogger(__name__)

IDENTITY = np.eye(2)


# --------------------------- Tipi ---------------------------

class ChristoffelField(SampledField):
    """
    Simboli di Christoffel di una connessione affine senza torsione.

    Convenzione degli indici: gamma[..., i, j, k] = Gamma^i_jk, simmetrico in (j, k).
    """
    value_shape = (2, 2, 2)
    kind = "christoffel"

    def symmetry_defect(self, u, v) -> float:
        gamma = self(u, v)
        return sup_norm(gamma - np.swapaxes(gamma, -1, -2))


class DifferenceTensor(ChristoffelField):
    """Sezione di S^2(T*) (x) T: differenza di due connessioni senza torsione."""
    kind = "difference"


class RicciData:
    """
    Tensore di Ricci decomposto: parte simmetrica Ric+ e coefficiente R della parte
    antisimmetrica, Ric- = R epsilon con epsilon_12 = 1.
    """

    def __init__(self, connection: ChristoffelField, h: Optional[float] = None):
        self.connection = connection
        self.chart_id = connection.chart_id
        self.h = h or projective_config.h_gamma

    def full(self, u, v) -> np.ndarray:
        return np.einsum("...kjkl->...jl", curvature_tensor(self.connection, u, v, self.h))

    def sym(self, u, v) -> np.ndarray:
        ric = self.full(u, v)
        return 0.5 * (ric + np.swapaxes(ric, -1, -2))

    def skew(self, u, v) -> np.ndarray:
        ric = self.full(u, v)
        return 0.5 * (ric[..., 0, 1] - ric[..., 1, 0])


class SchoutenMatrix(SampledField):
    """Componenti di frame S_ij del tensore di Schouten."""
    value_shape = (2, 2)
    kind = "schouten"


class ResidualReport(BaseModel):
    """Residuo sup-norm di un'operazione su una griglia, serializzabile in JSON."""
    operation: str = Field(..., description="Nome dell'operazione verificata")
    grid: int = Field(..., description="Lato della griglia di campionamento")
    sup_residual: float = Field(..., description="Residuo in sup-norm")
    order: Optional[float] = Field(None, description="Ordine di convergenza osservato, se stimato")


class ProjectiveComparison(BaseModel):
    equivalent: bool = Field(..., description="True se la parte a traccia nulla della differenza è sotto tol")
    residual: float = Field(..., description="Sup-norm della parte a traccia nulla")
    tol: float = Field(..., description="Tolleranza usata")


def _grid(chart_id: str, grid, n: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    if grid is not None:
        return grid
    return sample_grid(chart_id, n or projective_config.grid)


# --------------------------- Connessioni ---------------------------

def _metric_derivatives(g: MetricField, u, v, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Restituisce (G, dG) con dG[..., c, a, b] = d_c g_ab."""
    G, G_u, G_v = central_stencil(g.matrix, u, v, h)
    return G, np.stack([G_u, G_v], axis=-3)


def levi_civita(g: MetricField, h: Optional[float] = None) -> ChristoffelField:
    """
    Connessione di Levi-Civita: Gamma^i_jk = 1/2 g^il (d_j g_lk + d_k g_jl - d_l g_jk).

    Args:
        g (MetricField): Metrica definita positiva.
        h (float): Passo delle differenze centrali.

    Returns:
        ChristoffelField: Simboli di Christoffel (valutazione pigra).
    """
    h = h or projective_config.h

    def sampler(u, v):
        G, dG = _metric_derivatives(g, u, v, h)
        G_inv, _ = checked_inverse(G)
        lowered = (np.einsum("...jlk->...ljk", dG)
                   + np.einsum("...kjl->...ljk", dG)
                   - dG)
        return 0.5 * np.einsum("...il,...ljk->...ijk", G_inv, lowered)

    return ChristoffelField(sampler, g.chart_id)


def _sharp(g: MetricField, beta: OneFormField, u, v) -> np.ndarray:
    G_inv, _ = checked_inverse(g.matrix(u, v))
    return np.einsum("...ij,...j->...i", G_inv, beta(u, v))


def conformal_connection(g: MetricField, beta: OneFormField, h: Optional[float] = None) -> ChristoffelField:
    """
    Connessione conforme (di Weyl): g-Levi-Civita + g (x) beta^sharp - iota(beta).

    Soddisfa nabla g = 2 beta (x) g.
    """
    lc = levi_civita(g, h)

    def sampler(u, v):
        G = g.matrix(u, v)
        b = beta(u, v)
        b_sharp = _sharp(g, beta, u, v)
        return (lc(u, v)
                + np.einsum("...jk,...i->...ijk", G, b_sharp)
                - np.einsum("...j,ik->...ijk", b, IDENTITY)
                - np.einsum("...k,ij->...ijk", b, IDENTITY))

    return ChristoffelField(sampler, g.chart_id)


def covariant_derivative_metric(connection: ChristoffelField, g: MetricField, u, v,
                                h: Optional[float] = None) -> np.ndarray:
    """(nabla_k g)_ij = d_k g_ij - Gamma^l_ki g_lj - Gamma^l_kj g_il, indicizzato [..., k, i, j]."""
    h = h or projective_config.h
    G, dG = _metric_derivatives(g, u, v, h)
    gamma = connection(u, v)
    return (dG
            - np.einsum("...lki,...lj->...kij", gamma, G)
            - np.einsum("...lkj,...il->...kij", gamma, G))


def weyl_compatibility_field(connection: ChristoffelField, g: MetricField, beta: OneFormField,
                             h: Optional[float] = None) -> ScalarField:
    """Massimo puntuale di |nabla g - 2 beta (x) g| sulle componenti."""
    def sampler(u, v):
        nabla_g = covariant_derivative_metric(connection, g, u, v, h)
        target = 2.0 * np.einsum("...k,...ij->...kij", beta(u, v), g.matrix(u, v))
        return np.max(np.abs(nabla_g - target), axis=(-3, -2, -1))

    return ScalarField(sampler, g.chart_id)


def weyl_compatibility_residual(connection: ChristoffelField, g: MetricField, beta: OneFormField,
                                grid=None, h: Optional[float] = None) -> ResidualReport:
    """
    Residuo di compatibilità di Weyl nabla g = 2 beta (x) g in sup-norm sulla griglia.

    Returns:
        ResidualReport: operazione, lato della griglia, residuo.
    """
    U, V = _grid(g.chart_id, grid)
    residual = sup_norm(weyl_compatibility_field(connection, g, beta, h)(U, V))
    logger.debug("weyl_compatibility_residual su griglia %s: %.3e", U.shape, residual)
    return ResidualReport(operation="weyl_compatibility", grid=U.shape[0], sup_residual=residual)


# --------------------------- Decomposizione traccia / iota ---------------------------

def iota_embed(alpha: OneFormField) -> DifferenceTensor:
    """iota(alpha)^i_jk = alpha_j delta^i_k + alpha_k delta^i_j."""
    def sampler(u, v):
        a = alpha(u, v)
        return np.einsum("...j,ik->...ijk", a, IDENTITY) + np.einsum("...k,ij->...ijk", a, IDENTITY)

    return DifferenceTensor(sampler, alpha.chart_id)


def trace(phi: SampledField) -> OneFormField:
    """tr(phi)_j = phi^i_ij."""
    return OneFormField(lambda u, v: np.einsum("...iij->...j", phi(u, v)), phi.chart_id)


def trace_free_part(phi: SampledField) -> DifferenceTensor:
    """phi_0 = phi - 1/3 iota(tr phi)."""
    pure_trace = iota_embed(trace(phi))
    return DifferenceTensor(lambda u, v: phi(u, v) - pure_trace(u, v) / 3.0, phi.chart_id)


def difference_tensor(first: ChristoffelField, second: ChristoffelField) -> DifferenceTensor:
    return DifferenceTensor(lambda u, v: first(u, v) - second(u, v), first.chart_id)


def add(connection: ChristoffelField, phi: SampledField) -> ChristoffelField:
    return ChristoffelField(lambda u, v: connection(u, v) + phi(u, v), connection.chart_id)


def projectively_equivalent(first: ChristoffelField, second: ChristoffelField, tol: Optional[float] = None,
                            grid=None) -> ProjectiveComparison:
    """
    Criterio di Weyl: due connessioni senza torsione hanno le stesse geodetiche non
    parametrizzate se e solo se la loro differenza è pura traccia.
    """
    tol = tol or projective_config.tol
    U, V = _grid(first.chart_id, grid)
    residual = sup_norm(trace_free_part(difference_tensor(first, second))(U, V))
    return ProjectiveComparison(equivalent=residual < tol, residual=residual, tol=tol)


# --------------------------- Curvatura ---------------------------

def curvature_tensor(connection: ChristoffelField, u, v, h: Optional[float] = None) -> np.ndarray:
    """
    R^i_jkl = d_k Gamma^i_lj - d_l Gamma^i_kj + Gamma^i_km Gamma^m_lj - Gamma^i_lm Gamma^m_kj,
    indicizzato [..., i, j, k, l].
    """
    h = h or projective_config.h_gamma
    gamma, gamma_u, gamma_v = central_stencil(connection, u, v, h)
    d_gamma = np.stack([gamma_u, gamma_v], axis=-4)
    derivative = np.einsum("...kilj->...ijkl", d_gamma)
    quadratic = np.einsum("...ikm,...mlj->...ijkl", gamma, gamma)
    riemann = derivative + quadratic
    return riemann - np.swapaxes(riemann, -1, -2)


def ricci(connection: ChristoffelField, h: Optional[float] = None) -> RicciData:
    """Ricci R_jl + R epsilon_jl = R^k_jkl, decomposto in parte simmetrica e antisimmetrica."""
    return RicciData(connection, h)


def schouten(connection: ChristoffelField, coframe: CoframeField, h: Optional[float] = None) -> SchoutenMatrix:
    """
    Tensore di Schouten Sch = Ric+ - 1/3 Ric- in componenti di frame.

    La parte antisimmetrica ha coefficiente di frame R / det e, quindi S_12 = R_12 - R/3 e
    S_21 = R_12 + R/3.
    """
    data = ricci(connection, h)

    def sampler(u, v):
        e = coframe(u, v)
        inverse, det = checked_inverse(e, det_floor=0.0)
        sym_frame = np.einsum("...ai,...ab,...bj->...ij", inverse, data.sym(u, v), inverse)
        skew_frame = data.skew(u, v) / det
        return sym_frame - (skew_frame / 3.0)[..., None, None] * EPSILON

    return SchoutenMatrix(sampler, connection.chart_id)


def levi_civita_form(g: MetricField, h: Optional[float] = None) -> OneFormField:
    """
    Forma di Levi-Civita phi nella cocornice di Cholesky: d eta1 = -eta2^phi, d eta2 = eta1^phi.

    phi = c1 eta1 + c2 eta2 con c_i = (densità di d eta_i) / det e.
    """
    h = h or projective_config.h
    coframe = orthonormal_coframe(g)

    def sampler(u, v):
        e, e_u, e_v = central_stencil(coframe, u, v, h)
        d_eta = e_u[..., :, 1] - e_v[..., :, 0]
        det = e[..., 0, 0] * e[..., 1, 1] - e[..., 0, 1] * e[..., 1, 0]
        return from_frame(d_eta / det[..., None], e)

    return OneFormField(sampler, g.chart_id)


def gauss_curvature(g: MetricField, h: Optional[float] = None) -> ScalarField:
    """Curvatura di Gauss da d phi = -K eta1^eta2."""
    h = h or projective_config.h_gamma
    phi = levi_civita_form(g, h)
    d_phi = exterior_derivative_oneform(phi, h)

    def sampler(u, v):
        e = cholesky_coframe(g.matrix(u, v))
        det = e[..., 0, 0] * e[..., 1, 1]
        return -d_phi(u, v) / det

    return ScalarField(sampler, g.chart_id)


# --------------------------- Forme di connessione ---------------------------

def connection_form(connection: ChristoffelField, coframe: CoframeField, h: Optional[float] = None) -> FormMatrix:
    """
    Forma di connessione zeta^i_j di una connessione qualsiasi in una cocornice qualsiasi:
    zeta_a = -(d_a e) e^{-1} + e Gamma_a e^{-1}, con (Gamma_a)_bc = Gamma^b_ac.
    """
    h = h or projective_config.h

    def sampler(u, v):
        e, e_u, e_v = central_stencil(coframe, u, v, h)
        inverse, _ = checked_inverse(e, det_floor=0.0)
        gamma = connection(u, v)
        parts = []
        for axis, d_e in enumerate((e_u, e_v)):
            gamma_a = gamma[..., :, axis, :]
            parts.append(-d_e @ inverse + e @ gamma_a @ inverse)
        return np.stack(parts, axis=-1)

    return FormMatrix(sampler, 2, connection.chart_id)


def weyl_connection_form(g: MetricField, beta: OneFormField, h: Optional[float] = None,
                         orientation: Optional[int] = None) -> FormMatrix:
    """zeta = (-beta, *beta - phi; phi - *beta, -beta) nella cocornice ortonormale."""
    phi = levi_civita_form(g, h)
    star_beta = hodge_star(beta, g, orientation)

    def sampler(u, v):
        b = beta(u, v)
        rotation = star_beta(u, v) - phi(u, v)
        return np.stack([np.stack([-b, rotation], axis=-2), np.stack([-rotation, -b], axis=-2)], axis=-3)

    return FormMatrix(sampler, 2, g.chart_id)


def weyl_schouten(g: MetricField, beta: OneFormField, h: Optional[float] = None,
                  h_gamma: Optional[float] = None) -> SchoutenMatrix:
    """
    Schouten in forma chiusa per la connessione conforme:
    ((K - delta beta, -R/3), (R/3, K - delta beta)) con R = -*d beta.
    """
    K = gauss_curvature(g, h_gamma)
    delta_beta = codifferential(beta, g, h=h)
    rho = star_twoform(exterior_derivative_oneform(beta, h), g)

    def sampler(u, v):
        k = K(u, v) - delta_beta(u, v)
        r = rho(u, v) / 3.0
        return np.stack([np.stack([k, r], axis=-1), np.stack([-r, k], axis=-1)], axis=-2)

    return SchoutenMatrix(sampler, g.chart_id)


# --------------------------- Rigidità ---------------------------

def fitted_compatibility_residual(connection: ChristoffelField, g: MetricField, grid=None,
                                  h: Optional[float] = None) -> float:
    """
    Residuo irriducibile di nabla g - 2 gamma (x) g, con gamma stimato puntualmente ai
    minimi quadrati: gamma_k = <nabla_k g, g> / (2 |g|^2).
    """
    U, V = _grid(g.chart_id, grid)
    nabla_g = covariant_derivative_metric(connection, g, U, V, h)
    G = g.matrix(U, V)
    gamma = np.einsum("...kij,...ij->...k", nabla_g, G) / (2.0 * np.einsum("...ij,...ij->...", G, G))[..., None]
    residual = nabla_g - 2.0 * np.einsum("...k,...ij->...kij", gamma, G)
    return sup_norm(residual)


def conformal_kernel_singular_values(g: MetricField, u: float, v: float) -> np.ndarray:
    """
    Valori singolari della mappa lineare X -> g (x) X - 1/3 iota(X^flat) da R^2 a V (dim 8).

    Il nucleo è banale se e solo se il valore minimo è positivo.
    """
    G = g.matrix(u, v)
    columns = []
    for X in IDENTITY:
        X_flat = G @ X
        phi = (np.einsum("jk,i->ijk", G, X)
               - (np.einsum("j,ik->ijk", X_flat, IDENTITY) + np.einsum("k,ij->ijk", X_flat, IDENTITY)) / 3.0)
        columns.append(phi.ravel())
    return np.linalg.svd(np.stack(columns, axis=-1), compute_uv=False)
