"""Model types, heterotopic observation panel, loading matrices, simulators.

The latent state stacks q component fields, component j living on the
(non-auxiliary) vertices of its mesh. Observation rows for variable i at time
t map onto the state through w_ij-scaled basis matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from . import fem
from .errors import CholeskyFailure, PointOutsideMesh
from .mesh import Mesh, basis_matrix

_STREAM_CODES = {"eta": 1, "eps": 2, "z0": 3, "covariates": 4, "sites": 5, "init": 6}


def rng_stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Named RNG stream: one independent generator per stochastic term, all
    derived from the master seed, so toggling one term does not shift others."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(_STREAM_CODES[name], int(index)))
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Full parameter set: regression coefficients, noise variances, AR
    coefficients, loading matrix, rescale parameters, and the initial state.

    ``mu0`` may be None (zeros), length q (per-component value broadcast over
    the latent grid), or full state length. ``sigma0`` may be None (identity),
    length q (per-component iid variance), or a full covariance matrix. The
    broadcast forms let the same object parameterise both the exact simulator
    (latent grid = site union) and the mesh-based model.
    """

    beta: np.ndarray
    sigma2: np.ndarray
    f: np.ndarray
    w: np.ndarray
    kappa: np.ndarray
    mu0: np.ndarray | None = None
    sigma0: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.f = np.atleast_1d(np.asarray(self.f, dtype=float))
        self.w = np.atleast_2d(np.asarray(self.w, dtype=float))
        self.kappa = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        if self.mu0 is not None:
            self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        if self.sigma0 is not None:
            self.sigma0 = np.asarray(self.sigma0, dtype=float)

    @property
    def p(self) -> int:
        return self.w.shape[0]

    @property
    def q(self) -> int:
        return self.w.shape[1]

    def validate(self) -> None:
        if np.any(np.abs(self.f) >= 1):
            raise ValueError("autoregressive coefficients must lie in (-1, 1)")
        # zero is allowed so noise-free simulator configurations stay expressible
        if np.any(self.sigma2 < 0):
            raise ValueError("measurement-error variances must be nonnegative")
        if np.any(self.kappa <= 0):
            raise ValueError("kappa must be positive")
        if len(self.f) != self.q or len(self.kappa) != self.q:
            raise ValueError("f and kappa must have length q")
        if len(self.sigma2) != self.p:
            raise ValueError("sigma2 must have length p")
        if self.sigma0 is not None and self.sigma0.ndim == 2:
            if not np.allclose(self.sigma0, self.sigma0.T, atol=1e-10):
                raise ValueError("sigma0 must be symmetric")

    def state_mean(self, block_sizes) -> np.ndarray:
        """Initial state mean over blocks of the given sizes."""
        n = int(sum(block_sizes))
        if self.mu0 is None:
            return np.zeros(n)
        if len(self.mu0) == n:
            return np.asarray(self.mu0, dtype=float).copy()
        if len(self.mu0) == self.q:
            return np.repeat(self.mu0, block_sizes)
        raise ValueError("mu0 has incompatible length")

    def state_cov(self, block_sizes) -> np.ndarray:
        """Initial state covariance over blocks of the given sizes."""
        n = int(sum(block_sizes))
        if self.sigma0 is None:
            return np.eye(n)
        s0 = self.sigma0
        if s0.ndim == 2 and s0.shape == (n, n):
            return np.asarray(s0, dtype=float).copy()
        if s0.ndim <= 1 and np.size(s0) == self.q:
            return np.diag(np.repeat(np.atleast_1d(s0), block_sizes))
        raise ValueError("sigma0 has incompatible shape")

    def beta_blocks(self, n_covariates) -> list:
        """Split beta into per-variable coefficient vectors."""
        out = []
        start = 0
        for b in n_covariates:
            out.append(self.beta[start : start + b])
            start += b
        if start != len(self.beta):
            raise ValueError("beta length does not match covariate counts")
        return out


# ---------------------------------------------------------------------------
# observation panel
# ---------------------------------------------------------------------------

@dataclass
class PanelBlock:
    """Observations of one variable at one time: sites, values, covariates."""

    sites: np.ndarray  # (m, 2)
    y: np.ndarray      # (m,)
    x: np.ndarray      # (m, b_i)


@dataclass
class ObservationPanel:
    """Heterotopic, missing-data-aware panel.

    ``blocks[(i, t)]`` holds variable i (0-based) at time t (1-based); missing
    observations are simply absent rows, an entirely absent block means
    m_{i,t} = 0.
    """

    p: int
    T: int
    n_covariates: list
    blocks: dict = field(default_factory=dict)

    def block(self, i: int, t: int) -> PanelBlock | None:
        return self.blocks.get((i, t))

    def m(self, i: int, t: int) -> int:
        blk = self.blocks.get((i, t))
        return 0 if blk is None else len(blk.y)

    def m_t(self, t: int) -> int:
        return sum(self.m(i, t) for i in range(self.p))

    def total_obs(self, i: int) -> int:
        return sum(self.m(i, t) for t in range(1, self.T + 1))

    def n_obs(self) -> int:
        return sum(self.total_obs(i) for i in range(self.p))

    def validate(self) -> None:
        for (i, t), blk in self.blocks.items():
            if not (0 <= i < self.p and 1 <= t <= self.T):
                raise ValueError(f"block index ({i}, {t}) out of range")
            if len(blk.y) != len(blk.sites) or len(blk.y) != len(blk.x):
                raise ValueError(f"row-count mismatch in block ({i}, {t})")
            if blk.x.shape[1] != self.n_covariates[i]:
                raise ValueError(f"covariate count mismatch in block ({i}, {t})")

    def all_sites(self) -> np.ndarray:
        """Deduplicated union of all observed sites."""
        arrays = [blk.sites for blk in self.blocks.values() if len(blk.sites)]
        if not arrays:
            return np.empty((0, 2))
        return np.unique(np.vstack(arrays), axis=0)

    def stacked(self, t: int):
        """y_t, X_t' beta design rows, and per-variable slices at time t."""
        ys, xs, slices = [], [], []
        start = 0
        for i in range(self.p):
            blk = self.blocks.get((i, t))
            m = 0 if blk is None else len(blk.y)
            slices.append(slice(start, start + m))
            if m:
                ys.append(blk.y)
                xs.append(blk.x)
            start += m
        y = np.concatenate(ys) if ys else np.empty(0)
        return y, xs, slices

    def mean_offset(self, params: ModelParams, t: int) -> np.ndarray:
        """Stacked X_t' beta at time t."""
        betas = params.beta_blocks(self.n_covariates)
        parts = []
        for i in range(self.p):
            blk = self.blocks.get((i, t))
            if blk is not None and len(blk.y):
                parts.append(blk.x @ betas[i])
        return np.concatenate(parts) if parts else np.empty(0)

    # -- CSV format ---------------------------------------------------------

    def to_csv(self, path) -> None:
        k = max(self.n_covariates) if self.n_covariates else 0
        header = ["var", "site_x", "site_y", "t", "value"] + [
            f"cov_{j + 1}" for j in range(k)
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.p):
                for t in range(1, self.T + 1):
                    blk = self.blocks.get((i, t))
                    if blk is None:
                        continue
                    for r in range(len(blk.y)):
                        row = [
                            i + 1,
                            f"{blk.sites[r, 0]:.17g}",
                            f"{blk.sites[r, 1]:.17g}",
                            t,
                            f"{blk.y[r]:.17g}",
                        ]
                        row += [f"{v:.17g}" for v in blk.x[r]]
                        row += ["0"] * (k - blk.x.shape[1])
                        writer.writerow(row)

    @classmethod
    def from_csv(cls, path, n_covariates=None) -> "ObservationPanel":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:5] != ["var", "site_x", "site_y", "t", "value"]:
                raise ValueError(f"unexpected panel header: {header[:5]}")
            k = len(header) - 5
            for line in reader:
                if not line:
                    continue
                rows.append(
                    (
                        int(line[0]) - 1,
                        float(line[1]),
                        float(line[2]),
                        int(line[3]),
                        float(line[4]),
                        [float(v) for v in line[5 : 5 + k]],
                    )
                )
        if not rows:
            raise ValueError("empty panel file")
        p = max(r[0] for r in rows) + 1
        T = max(r[3] for r in rows)
        if n_covariates is None:
            n_covariates = [k] * p
        grouped: dict = {}
        for i, x, y, t, val, cov in rows:
            grouped.setdefault((i, t), []).append((x, y, val, cov))
        panel = cls(p=p, T=T, n_covariates=list(n_covariates))
        for (i, t), entries in grouped.items():
            sites = np.array([(e[0], e[1]) for e in entries])
            vals = np.array([e[2] for e in entries])
            covs = np.array([e[3][: n_covariates[i]] for e in entries])
            panel.blocks[(i, t)] = PanelBlock(sites, vals, covs)
        panel.validate()
        return panel


# ---------------------------------------------------------------------------
# basis cache and loading matrices
# ---------------------------------------------------------------------------

def latent_basis_matrix(mesh: Mesh, points) -> sparse.csr_matrix:
    """Basis rows restricted to latent (non-auxiliary) vertices.

    On a buffered mesh, rows of sites off the latent hull put mass on
    auxiliary vertices; that mass is dropped and the row renormalised so each
    row remains a convex combination of latent vertices (sites just inside
    the buffer extrapolate from the nearest latent support). Sites without
    any latent support are rejected.
    """
    full = basis_matrix(mesh, points)
    restricted = full[:, mesh.interior_index].tocsr()
    sums = np.asarray(restricted.sum(axis=1)).ravel()
    if np.any(sums < 1e-8):
        bad = int(np.argmin(sums))
        raise PointOutsideMesh(
            f"site {tuple(np.asarray(points)[bad])} has no latent basis support"
        )
    inv = sparse.diags(1.0 / sums)
    out = (inv @ restricted).tocsr()
    out.sort_indices()
    return out


def predictable_mask(meshes, sites) -> np.ndarray:
    """True for sites with latent basis support on every component mesh.

    Sites outside a mesh hull, or contained only in auxiliary-cornered buffer
    triangles, cannot be interpolated from the latent field and are flagged
    False (validation drops them, mirroring the usual handling of stations
    that fall off the latent domain)."""
    from .mesh import basis_row

    sites = np.asarray(sites, dtype=float)
    mask = np.ones(len(sites), dtype=bool)
    for mesh in meshes:
        latent = np.zeros(mesh.n_vertices, dtype=bool)
        latent[mesh.interior_index] = True
        for r, point in enumerate(sites):
            if not mask[r]:
                continue
            try:
                idx, val = basis_row(mesh, point)
            except PointOutsideMesh:
                mask[r] = False
                continue
            support = sum(v for i, v in zip(idx, val) if latent[i])
            if support < 1e-8:
                mask[r] = False
    return mask


def filter_predictable(panel: ObservationPanel, meshes) -> tuple:
    """Drop panel rows without latent basis support; returns (panel, dropped)."""
    out = ObservationPanel(p=panel.p, T=panel.T, n_covariates=list(panel.n_covariates))
    dropped = 0
    mask_by_sites: dict = {}
    for key, blk in sorted(panel.blocks.items()):
        skey = blk.sites.tobytes()
        if skey not in mask_by_sites:
            mask_by_sites[skey] = predictable_mask(meshes, blk.sites)
        mask = mask_by_sites[skey]
        dropped += int((~mask).sum())
        if mask.any():
            out.blocks[key] = PanelBlock(
                blk.sites[mask].copy(), blk.y[mask].copy(), blk.x[mask].copy()
            )
    return out, dropped


class BasisCache:
    """Per (variable, time) basis matrices of observation sites against each
    component mesh, deduplicated across repeated site sets."""

    def __init__(self, meshes, panel: ObservationPanel):
        self.meshes = list(meshes)
        self.panel = panel
        self.block_sizes = [m.n_latent for m in self.meshes]
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self._by_sites: dict = {}
        self._entries: dict = {}
        self._fems: dict = {}
        for (i, t), blk in panel.blocks.items():
            if len(blk.y) == 0:
                continue
            key = blk.sites.tobytes()
            if key not in self._by_sites:
                self._by_sites[key] = [
                    latent_basis_matrix(mesh, blk.sites) for mesh in self.meshes
                ]
            self._entries[(i, t)] = self._by_sites[key]

    def fem_matrices(self, j: int):
        """Assembled FEM matrices of component mesh j (memoized; meshes are
        immutable and may be shared across components)."""
        key = id(self.meshes[j])
        if key not in self._fems:
            self._fems[key] = fem.assemble(self.meshes[j])
        return self._fems[key]

    @property
    def q(self) -> int:
        return len(self.meshes)

    @property
    def state_dim(self) -> int:
        return int(self.offsets[-1])

    def psi(self, i: int, t: int) -> list | None:
        """Basis matrices [Ψ_{i1,t}, ..., Ψ_{iq,t}] or None when m_{i,t}=0."""
        return self._entries.get((i, t))

    def point_rows(self, point) -> list:
        """Per-component basis rows of one prediction point."""
        return [latent_basis_matrix(mesh, [point]) for mesh in self.meshes]


def build_loading(w: np.ndarray, cache: BasisCache, t: int) -> sparse.csr_matrix:
    """Stacked loading matrix at time t: block (i, j) equals w_ij Ψ_{ij,t}."""
    w = np.atleast_2d(w)
    p = cache.panel.p
    rows = []
    for i in range(p):
        psis = cache.psi(i, t)
        if psis is None:
            continue
        rows.append(sparse.hstack([w[i, j] * psis[j] for j in range(cache.q)]))
    if not rows:
        return sparse.csr_matrix((0, cache.state_dim))
    return sparse.vstack(rows).tocsr()


def loading_row(w: np.ndarray, cache: BasisCache, i: int, t: int):
    """Block row [w_i1 Ψ_{i1,t}, ..., w_iq Ψ_{iq,t}] for a single variable."""
    psis = cache.psi(i, t)
    if psis is None:
        return None
    return sparse.hstack([w[i, j] * psis[j] for j in range(cache.q)]).tocsr()


# ---------------------------------------------------------------------------
# simulators
# ---------------------------------------------------------------------------

@dataclass
class SimulationTruth:
    """Hidden ground truth kept alongside a simulated panel for oracle tests."""

    latent_sites: np.ndarray        # exact: site union; low-rank: stacked latent vertices
    z: np.ndarray                   # (q, T+1, n_latent_j) stacked as list when ragged
    site_index: list                # per variable: indices into latent_sites (exact only)


def _chol_with_jitter(cov: np.ndarray) -> np.ndarray:
    jitter = 0.0
    for attempt in range(6):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError:
            jitter = 1e-10 * (10.0**attempt)
    raise CholeskyFailure("dense covariance not PD after jitter escalation")


def _default_covariates(rng, m: int, b: int) -> np.ndarray:
    return rng.standard_normal((m, b))


def simulate_exact(
    params: ModelParams,
    sites,
    T: int,
    seed: int,
    n_covariates: int = 1,
):
    """Simulate the exact (continuous-field) model at the given sites.

    ``sites`` is one (m_i, 2) array per variable. Innovations are drawn from
    the dense unit-variance Matérn covariance over the union of all sites;
    the initial state defaults to iid N(1, 1) per component and site. Returns
    (panel, truth); bit-reproducible for a given seed.
    """
    params.validate()
    p, q = params.p, params.q
    sites = [np.asarray(s, dtype=float) for s in sites]
    if len(sites) != p:
        raise ValueError("need one site array per variable")
    union = np.unique(np.vstack(sites), axis=0)
    m_union = len(union)
    site_index = []
    for s in sites:
        d = cdist(s, union)
        idx = d.argmin(axis=1)
        if not np.allclose(d[np.arange(len(s)), idx], 0.0, atol=1e-12):
            raise ValueError("site not found in union (non-finite coordinates?)")
        site_index.append(idx)

    chols = []
    for j in range(q):
        cov = fem.matern_cov(cdist(union, union), params.kappa[j])
        chols.append(_chol_with_jitter(cov))

    mu0 = params.mu0 if params.mu0 is not None else np.ones(q)
    if len(np.atleast_1d(mu0)) != q:
        raise ValueError("exact simulator expects a per-component mu0")
    s0 = params.sigma0 if params.sigma0 is not None else np.ones(q)
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    if s0.ndim != 1 or len(s0) != q:
        raise ValueError("exact simulator expects a per-component sigma0 variance")

    z = np.zeros((q, T + 1, m_union))
    for j in range(q):
        rng0 = rng_stream(seed, "z0", j)
        z[j, 0] = mu0[j] + np.sqrt(s0[j]) * rng0.standard_normal(m_union)
        rng_eta = rng_stream(seed, "eta", j)
        for t in range(1, T + 1):
            eta = chols[j] @ rng_eta.standard_normal(m_union)
            z[j, t] = params.f[j] * z[j, t - 1] + eta

    betas = params.beta_blocks([n_covariates] * p)
    panel = ObservationPanel(p=p, T=T, n_covariates=[n_covariates] * p)
    for i in range(p):
        rng_eps = rng_stream(seed, "eps", i)
        rng_cov = rng_stream(seed, "covariates", i)
        m_i = len(sites[i])
        for t in range(1, T + 1):
            x = _default_covariates(rng_cov, m_i, n_covariates)
            latent = sum(
                params.w[i, j] * z[j, t, site_index[i]] for j in range(q)
            )
            eps = np.sqrt(params.sigma2[i]) * rng_eps.standard_normal(m_i)
            y = x @ betas[i] + latent + eps
            panel.blocks[(i, t)] = PanelBlock(sites[i].copy(), y, x)
    truth = SimulationTruth(union, z, site_index)
    return panel, truth


def simulate_lowrank(
    params: ModelParams,
    meshes,
    sites,
    T: int,
    seed: int,
    n_covariates: int = 1,
):
    """Simulate the low-rank model: per-component innovations are drawn from
    the unit-variance SPDE covariance on each mesh, propagated by the AR
    recursion, and observed through the basis matrices.
    """
    params.validate()
    p, q = params.p, params.q
    meshes = list(meshes)
    if len(meshes) != q:
        raise ValueError("need one mesh per component")
    sites = [np.asarray(s, dtype=float) for s in sites]

    covs = []
    for j, mesh in enumerate(meshes):
        mats = fem.assemble(mesh)
        prec = fem.precision(mesh, mats, float(params.kappa[j]))
        covs.append(prec.unit_cov())
    chols = [_chol_with_jitter(c) for c in covs]
    sizes = [c.shape[0] for c in covs]

    mu0 = params.state_mean(sizes)
    sigma0 = params.state_cov(sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    z = [np.zeros((T + 1, n)) for n in sizes]
    chol0 = _chol_with_jitter(sigma0)
    rng0 = rng_stream(seed, "z0", 0)
    z0_full = mu0 + chol0 @ rng0.standard_normal(int(offsets[-1]))
    for j in range(q):
        z[j][0] = z0_full[offsets[j] : offsets[j + 1]]
        rng_eta = rng_stream(seed, "eta", j)
        for t in range(1, T + 1):
            eta = chols[j] @ rng_eta.standard_normal(sizes[j])
            z[j][t] = params.f[j] * z[j][t - 1] + eta

    psi_per_var = [
        [latent_basis_matrix(meshes[j], sites[i]) for j in range(q)]
        for i in range(p)
    ]
    betas = params.beta_blocks([n_covariates] * p)
    panel = ObservationPanel(p=p, T=T, n_covariates=[n_covariates] * p)
    for i in range(p):
        rng_eps = rng_stream(seed, "eps", i)
        rng_cov = rng_stream(seed, "covariates", i)
        m_i = len(sites[i])
        for t in range(1, T + 1):
            x = _default_covariates(rng_cov, m_i, n_covariates)
            latent = sum(
                params.w[i, j] * (psi_per_var[i][j] @ z[j][t]) for j in range(q)
            )
            eps = np.sqrt(params.sigma2[i]) * rng_eps.standard_normal(m_i)
            y = x @ betas[i] + latent + eps
            panel.blocks[(i, t)] = PanelBlock(sites[i].copy(), y, x)
    latent_sites = np.vstack([m.latent_vertices for m in meshes])
    zarr = np.empty(q, dtype=object)
    for j in range(q):
        zarr[j] = z[j]
    truth = SimulationTruth(latent_sites, zarr, [])
    return panel, truth


def drop_observations(panel: ObservationPanel, fraction: float, seed: int) -> ObservationPanel:
    """Randomly drop a fraction of observation rows (missing-data panels)."""
    rng = rng_stream(seed, "sites", 0)
    out = ObservationPanel(p=panel.p, T=panel.T, n_covariates=list(panel.n_covariates))
    for key, blk in sorted(panel.blocks.items()):
        keep = rng.uniform(size=len(blk.y)) >= fraction
        if keep.any():
            out.blocks[key] = PanelBlock(
                blk.sites[keep].copy(), blk.y[keep].copy(), blk.x[keep].copy()
            )
    return out
