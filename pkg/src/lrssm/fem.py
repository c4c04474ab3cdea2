"""FEM matrices for the SPDE-GMRF construction and Matérn references.

The precision of the latent innovation field is built on the (buffered) mesh
as Q* = K C̃⁻¹ K with K = κ² C̃ + G and the lumped mass C̃, then restricted to
the non-auxiliary vertices. Q* is the precision of the raw SPDE solution,
whose marginal variance is ``spde_variance(kappa)``; dividing the covariance
by that constant gives the unit-variance field matching ``matern_cov``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import k1

from .errors import DegenerateTriangle, NonPositiveKappa
from .mesh import Mesh


@dataclass(frozen=True)
class FemMatrices:
    """Mass C, lumped mass diagonal C̃ (as a vector), and stiffness G over all
    mesh vertices (including auxiliary ones)."""

    mass: sparse.csr_matrix
    lumped: np.ndarray
    stiffness: sparse.csr_matrix

    @property
    def n(self) -> int:
        return self.mass.shape[0]


def element_mass(area: float) -> np.ndarray:
    """Element mass matrix of a linear triangle: (A/12) [[2,1,1],[1,2,1],[1,1,2]]."""
    return (area / 12.0) * np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]])


def element_stiffness(a, b, c) -> np.ndarray:
    """Element stiffness from the constant gradients of the barycentric bases."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    if area2 <= 0:
        raise DegenerateTriangle("non-positive triangle area")
    # grad of barycentric i is the rotated opposite edge / (2A)
    grads = np.array(
        [
            [b[1] - c[1], c[0] - b[0]],
            [c[1] - a[1], a[0] - c[0]],
            [a[1] - b[1], b[0] - a[0]],
        ]
    ) / area2
    return 0.5 * area2 * grads @ grads.T


def assemble(mesh: Mesh) -> FemMatrices:
    """Assemble mass, lumped-mass, and stiffness matrices over the mesh.

    Element contributions accumulate in triangle order, so the result is
    independent of any internal parallel schedule.
    """
    n = mesh.n_vertices
    # dict accumulation keeps the scatter order deterministic (triangle
    # order), so the result matches the per-element sum bit for bit
    macc: dict = {}
    gacc: dict = {}
    v = mesh.vertices
    for i, j, k in mesh.triangles:
        a, b, c = v[i], v[j], v[k]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if area2 <= 0:
            raise DegenerateTriangle(f"triangle ({i},{j},{k}) has area <= 0")
        me = element_mass(0.5 * area2)
        ge = element_stiffness(a, b, c)
        idx = (int(i), int(j), int(k))
        for r in range(3):
            for s in range(3):
                key = (idx[r], idx[s])
                macc[key] = macc.get(key, 0.0) + me[r, s]
                gacc[key] = gacc.get(key, 0.0) + ge[r, s]
    keys = np.array(sorted(macc), dtype=np.int64)
    mdata = np.array([macc[(i, j)] for i, j in keys])
    gdata = np.array([gacc[(i, j)] for i, j in keys])
    mass = sparse.csr_matrix((mdata, (keys[:, 0], keys[:, 1])), shape=(n, n))
    stiffness = sparse.csr_matrix((gdata, (keys[:, 0], keys[:, 1])), shape=(n, n))
    mass.sort_indices()
    stiffness.sort_indices()
    lumped = np.asarray(mass.sum(axis=1)).ravel()  # <psi_i, 1> by unity partition
    return FemMatrices(mass, lumped, stiffness)


@dataclass(frozen=True)
class Precision:
    """SPDE precision restricted to the non-auxiliary vertices.

    ``matrix`` is the sparse principal submatrix of Q* = K C̃⁻¹ K (SPD, with
    the 2-hop adjacency sparsity pattern). The innovation covariance of the
    latent field, ``dense_cov()``, marginalises the auxiliary vertices:
    (Q*⁻¹)[I, I]. The two coincide (inverse of each other) exactly when the
    mesh carries no auxiliary vertices; conditioning on zero boundary values
    instead of marginalising would re-introduce the boundary artefact the
    buffer exists to remove.
    """

    matrix: sparse.csr_matrix
    kappa: float
    _cov: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense_cov(self) -> np.ndarray:
        """Dense innovation covariance (auxiliary vertices marginalised)."""
        return self._cov

    def logdet(self) -> float:
        """log-determinant of the innovation precision dense_cov()⁻¹."""
        sign, value = np.linalg.slogdet(self._cov)
        if sign <= 0:
            raise np.linalg.LinAlgError("innovation covariance not PD")
        return -float(value)

    def unit_cov(self) -> np.ndarray:
        """Innovation covariance rescaled to unit marginal variance (the
        covariance of the innovation field matching ``matern_cov``)."""
        return self._cov / spde_variance(self.kappa)

    def unit_precision(self) -> np.ndarray:
        prec = np.linalg.inv(self.unit_cov())
        return 0.5 * (prec + prec.T)

    def unit_logdet(self) -> float:
        """log-determinant of the unit-variance innovation precision."""
        return self.n * np.log(spde_variance(self.kappa)) + self.logdet()


def build_k(fem: FemMatrices, kappa: float, use_exact_mass: bool = False) -> sparse.csr_matrix:
    """K = κ² C̃ + G (or κ² C + G when ``use_exact_mass``)."""
    if kappa <= 0:
        raise NonPositiveKappa(f"kappa = {kappa}")
    if use_exact_mass:
        return (kappa**2) * fem.mass + fem.stiffness
    return (kappa**2) * sparse.diags(fem.lumped) + fem.stiffness


def precision(
    mesh: Mesh,
    fem: FemMatrices,
    kappa: float,
    use_exact_mass_in_k: bool = False,
) -> Precision:
    """SPDE precision on the mesh, restricted to non-auxiliary vertices.

    ``use_exact_mass_in_k`` switches K to the exact mass matrix for
    comparison; the inner inverse always uses the lumped C̃ (that is what
    makes Q sparse).
    """
    if kappa <= 0:
        raise NonPositiveKappa(f"kappa = {kappa}")
    K = build_k(fem, kappa, use_exact_mass=use_exact_mass_in_k)
    cinv = sparse.diags(1.0 / fem.lumped)
    q_full = (K @ cinv @ K).tocsr()
    idx = mesh.interior_index
    lu = splu(q_full.tocsc())
    if len(idx) != mesh.n_vertices:
        q = q_full[idx][:, idx].tocsr()
        rhs = np.zeros((mesh.n_vertices, len(idx)))
        rhs[idx, np.arange(len(idx))] = 1.0
        cov = lu.solve(rhs)[idx]
    else:
        q = q_full
        cov = lu.solve(np.eye(mesh.n_vertices))
    q.sort_indices()
    cov = 0.5 * (cov + cov.T)
    return Precision(q, float(kappa), cov)


def logdet_full(fem: FemMatrices, kappa: float) -> float:
    """log|Q*| of the unrestricted matrix via 2 log|K| − log|C̃|.

    Exact only for the full (extended-mesh) matrix; the restricted Q of
    :func:`precision` needs :meth:`Precision.logdet` instead.
    """
    K = build_k(fem, kappa)
    lu = splu(K.tocsc())
    logdet_k = float(
        np.log(np.abs(lu.L.diagonal())).sum() + np.log(np.abs(lu.U.diagonal())).sum()
    )
    return 2.0 * logdet_k - float(np.log(fem.lumped).sum())


def spde_variance(kappa: float) -> float:
    """Marginal variance 1/(4π κ²) of the ν=1 Whittle SPDE solution on R²."""
    return 1.0 / (4.0 * np.pi * kappa**2)


def matern_cov(d, kappa: float):
    """Matérn correlation (ν = 1, unit variance): (κd) K₁(κd), 1 at d = 0."""
    if kappa <= 0:
        raise NonPositiveKappa(f"kappa = {kappa}")
    scalar = np.isscalar(d) or np.ndim(d) == 0
    x = kappa * np.atleast_1d(np.asarray(d, dtype=float))
    out = np.ones_like(x)
    pos = x > 0
    out[pos] = x[pos] * k1(x[pos])
    return float(out[0]) if scalar else out


def folded_matern_1d(u: float, v: float, kappa: float, length: float, n_terms: int = 16) -> float:
    """Covariance on [0, L] under Neumann conditions: the reflection sum
    Σ_k { r(u, v − 2kL) + r(u, 2kL − v) } truncated at |k| ≤ n_terms.

    Serves as the oracle for boundary-effect tests.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    total = 0.0
    for k in range(-n_terms, n_terms + 1):
        total += matern_cov(abs(u - (v - 2 * k * length)), kappa)
        total += matern_cov(abs(u - (2 * k * length - v)), kappa)
    return float(total)


def correlation_from_precision(prec: Precision) -> np.ndarray:
    """Correlation matrix of the field with precision ``prec``."""
    cov = prec.dense_cov()
    d = np.sqrt(np.diag(cov))
    return cov / np.outer(d, d)
