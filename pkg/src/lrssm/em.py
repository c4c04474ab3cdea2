"""EM maximum-likelihood estimation with closed-form M-step updates and a
per-component golden-section search for the rescale parameters.

Update order within an iteration: beta, sigma2, W, f, kappa, (mu0, Sigma0),
each using the freshest available values of the other parameters. Every
closed-form update is the exact coordinate minimiser of the expected
complete-data objective, so the observed-data log-likelihood trace is
non-decreasing (generalised EM); the kappa search result is kept only when it
improves its objective.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import fem
from .errors import (
    DegenerateDenominator,
    NoObservationsForVariable,
    SingularNormalEquations,
    SingularRowSystem,
)
from .kalman import SmootherMoments, kalman_filter, kalman_smooth
from .model import (
    BasisCache,
    ModelParams,
    ObservationPanel,
    loading_row,
    rng_stream,
)

_SQRT8 = math.sqrt(8.0)


@dataclass
class EmConfig:
    """EM run configuration; defaults mirror the reference experimental setup
    (relative log-likelihood tolerance 1e-4, at most 300 iterations)."""

    max_iter: int = 300
    rel_tol: float = 1e-4
    kappa_bounds: tuple = (0.1 * _SQRT8, 20.0 * _SQRT8)
    kappa_tol: float = 1e-3
    init: ModelParams | None = None
    init_ranges: dict = field(default_factory=dict)
    rng_seed: int = 0

    def validate(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        lo, hi = self.kappa_bounds
        if not 0 < lo < hi:
            raise ValueError("kappa bounds must satisfy 0 < lo < hi")


@dataclass
class FitResult:
    params: ModelParams
    loglik_trace: list
    iterations: int
    converged: bool
    moments: SmootherMoments
    meshes: list
    wall_time: float
    se: None = None


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def component_precisions(params: ModelParams, cache: BasisCache):
    """Per-component Precision objects at the current kappa values."""
    out = []
    for j, mesh in enumerate(cache.meshes):
        mats = cache.fem_matrices(j)
        out.append(fem.precision(mesh, mats, float(params.kappa[j])))
    return out


def e_step(params: ModelParams, panel: ObservationPanel, cache: BasisCache):
    """Kalman filter + smoother at the current parameters.

    Returns (moments, loglik)."""
    precs = component_precisions(params, cache)
    qinv = [p.unit_cov() for p in precs]
    filt = kalman_filter(params, panel, cache, qinv)
    moments = kalman_smooth(params, cache, filt)
    return moments, filt.loglik


def sufficient_stats(moments: SmootherMoments):
    """S11, S10, S00 sums of second moments over t = 1..T."""
    T = moments.p_lag.shape[0]
    z = moments.z_smooth
    s11 = moments.p_smooth[1:].sum(axis=0) + sum(
        np.outer(z[t], z[t]) for t in range(1, T + 1)
    )
    s00 = moments.p_smooth[:-1].sum(axis=0) + sum(
        np.outer(z[t - 1], z[t - 1]) for t in range(1, T + 1)
    )
    s10 = moments.p_lag.sum(axis=0) + sum(
        np.outer(z[t], z[t - 1]) for t in range(1, T + 1)
    )
    return s11, s10, s00


def _block(mat: np.ndarray, offsets, i: int) -> np.ndarray:
    s = slice(offsets[i], offsets[i + 1])
    return mat[s, s]


# ---------------------------------------------------------------------------
# M-step updates
# ---------------------------------------------------------------------------

def update_beta(moments, panel, cache, params) -> np.ndarray:
    """Generalised least squares of the latent-adjusted observations on the
    covariates; the block-diagonal design decouples across variables."""
    betas = []
    for i in range(panel.p):
        b = panel.n_covariates[i]
        xtx = np.zeros((b, b))
        xty = np.zeros(b)
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            row = loading_row(params.w, cache, i, t)
            resid = blk.y - row @ moments.z_smooth[t]
            xtx += blk.x.T @ blk.x
            xty += blk.x.T @ resid
        try:
            betas.append(linalg.solve(xtx, xty, assume_a="pos"))
        except np.linalg.LinAlgError as exc:
            raise SingularNormalEquations(f"variable {i}: {exc}") from exc
    return np.concatenate(betas)


def update_sigma2(moments, panel, cache, params) -> np.ndarray:
    """Per-variable mean of squared residuals plus the smoother-variance
    trace term."""
    out = np.zeros(panel.p)
    betas = params.beta_blocks(panel.n_covariates)
    for i in range(panel.p):
        count = panel.total_obs(i)
        if count == 0:
            raise NoObservationsForVariable(f"variable {i} never observed")
        acc = 0.0
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            row = loading_row(params.w, cache, i, t)
            resid = blk.y - blk.x @ betas[i] - row @ moments.z_smooth[t]
            acc += resid @ resid
            rp = row @ moments.p_smooth[t]          # (m, N) dense
            acc += float(row.multiply(rp).sum())    # tr(row P row')
        out[i] = acc / count
    return out


def update_w(moments, panel, cache, params) -> np.ndarray:
    """Row-wise solve w_i = R_i^{-1} g_i from the smoothed latent moments."""
    p, q = panel.p, cache.q
    offsets = cache.offsets
    betas = params.beta_blocks(panel.n_covariates)
    w_new = np.zeros((p, q))
    for i in range(p):
        g = np.zeros(q)
        r = np.zeros((q, q))
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            psis = cache.psi(i, t)
            resid = blk.y - blk.x @ betas[i]
            z_t = moments.z_smooth[t]
            proj = [
                psis[j] @ z_t[offsets[j] : offsets[j + 1]] for j in range(q)
            ]
            for j in range(q):
                g[j] += resid @ proj[j]
                for k in range(q):
                    pkj = moments.p_smooth[t][
                        offsets[k] : offsets[k + 1], offsets[j] : offsets[j + 1]
                    ]
                    r[j, k] += proj[j] @ proj[k] + float(
                        psis[j].multiply(psis[k] @ pkj).sum()
                    )
        try:
            w_new[i] = linalg.solve(r, g, assume_a="pos")
        except np.linalg.LinAlgError as exc:
            raise SingularRowSystem(f"variable {i}: {exc}") from exc
    return w_new


def update_f(moments, params, cache) -> np.ndarray:
    """Ratio of precision-weighted lag-one to lag-zero smoothed moments,
    clamped into the stationarity region."""
    s11, s10, s00 = sufficient_stats(moments)
    return _update_f_from_stats(s10, s00, params, cache)


def _update_f_from_stats(s10, s00, params, cache) -> np.ndarray:
    precs = component_precisions(params, cache)
    offsets = cache.offsets
    out = np.zeros(cache.q)
    for j in range(cache.q):
        qmat = precs[j].unit_precision()
        num = float(np.sum(qmat * _block(s10, offsets, j)))
        den = float(np.sum(qmat * _block(s00, offsets, j)))
        if den <= 0:
            raise DegenerateDenominator(f"component {j}: denominator {den}")
        out[j] = np.clip(num / den, -1 + 1e-6, 1 - 1e-6)
    return out


def kappa_objective(kappa: float, a_mat: np.ndarray, T: int, cache: BasisCache, j: int) -> float:
    """-T log|Q_kappa| + tr(Q_kappa A) for component j (unit-variance field)."""
    mesh = cache.meshes[j]
    mats = cache.fem_matrices(j)
    prec = fem.precision(mesh, mats, kappa)
    return -T * prec.unit_logdet() + float(np.sum(prec.unit_precision() * a_mat))


def golden_section(fun, lo: float, hi: float, tol: float):
    """Golden-section minimisation on [lo, hi]; returns (x, f(x))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol * max(1.0, abs(a) + abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return (c, fc) if fc < fd else (d, fd)


def update_kappa(moments, params, cache, component: int, config: EmConfig,
                 stats=None) -> float:
    """Golden-section search (on log kappa) of the component objective."""
    if stats is None:
        s11, s10, s00 = sufficient_stats(moments)
    else:
        s11, s10, s00 = stats
    offsets = cache.offsets
    j = component
    f_j = float(params.f[j])
    a_mat = (
        _block(s11, offsets, j)
        - f_j * _block(s10, offsets, j)
        - f_j * _block(s10, offsets, j).T
        + f_j**2 * _block(s00, offsets, j)
    )
    T = moments.p_lag.shape[0]

    def fun(log_k):
        return kappa_objective(math.exp(log_k), a_mat, T, cache, j)

    lo, hi = config.kappa_bounds
    log_x, f_x = golden_section(fun, math.log(lo), math.log(hi), config.kappa_tol)
    x = math.exp(log_x)
    span = math.log(hi) - math.log(lo)
    if min(log_x - math.log(lo), math.log(hi) - log_x) < 2 * config.kappa_tol * span:
        warnings.warn(
            f"kappa search for component {j} ended at the bound {x:.4g}; "
            "no interior minimum found"
        )
    # generalised EM guard: never accept a worse objective than the incumbent
    f_old = fun(math.log(params.kappa[j]))
    if f_x >= f_old:
        return float(params.kappa[j])
    return float(x)


def update_initial(moments) -> tuple:
    """mu0 = smoothed initial mean, Sigma0 = smoothed initial covariance."""
    return moments.z_smooth[0].copy(), moments.p_smooth[0].copy()


# ---------------------------------------------------------------------------
# expected complete-data objective (for M-step optimality checks)
# ---------------------------------------------------------------------------

def q_objective(params: ModelParams, moments, panel, cache) -> float:
    """The expected -2 log complete-data likelihood (up to constants),
    evaluated with the given smoothed moments.

    Every M-step update, holding the others fixed, must not increase this.
    """
    sizes = cache.block_sizes
    offsets = cache.offsets
    mu0 = params.state_mean(sizes)
    sigma0 = params.state_cov(sizes)
    sign, logdet0 = np.linalg.slogdet(sigma0)
    if sign <= 0:
        return np.inf
    d0 = moments.z_smooth[0] - mu0
    total = logdet0 + float(
        np.sum(np.linalg.inv(sigma0) * (np.outer(d0, d0) + moments.p_smooth[0]))
    )

    betas = params.beta_blocks(panel.n_covariates)
    for i in range(panel.p):
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            row = loading_row(params.w, cache, i, t)
            resid = blk.y - blk.x @ betas[i] - row @ moments.z_smooth[t]
            quad = resid @ resid + float(
                row.multiply(row @ moments.p_smooth[t]).sum()
            )
            total += len(blk.y) * np.log(params.sigma2[i]) + quad / params.sigma2[i]

    s11, s10, s00 = sufficient_stats(moments)
    T = moments.p_lag.shape[0]
    precs = component_precisions(params, cache)
    for j in range(cache.q):
        f_j = float(params.f[j])
        a_mat = (
            _block(s11, offsets, j)
            - f_j * _block(s10, offsets, j)
            - f_j * _block(s10, offsets, j).T
            + f_j**2 * _block(s00, offsets, j)
        )
        total += -T * precs[j].unit_logdet() + float(
            np.sum(precs[j].unit_precision() * a_mat)
        )
    return float(total)


# ---------------------------------------------------------------------------
# identifiability convention
# ---------------------------------------------------------------------------

def apply_identifiability(params: ModelParams, moments: SmootherMoments, cache: BasisCache):
    """Sort components by descending f, then flip signs so each W column's
    first nonzero entry is positive; the permutation and sign flips are
    applied consistently to W columns, kappa, f, the initial state, and the
    smoothed moments. Returns (params, moments, mesh order)."""
    order = list(np.argsort(-params.f, kind="stable"))
    sizes = [cache.block_sizes[j] for j in order]
    offsets_old = cache.offsets

    perm = np.concatenate(
        [np.arange(offsets_old[j], offsets_old[j + 1]) for j in order]
    ).astype(int)

    w = params.w[:, order].copy()
    signs = np.ones(len(order))
    for jn in range(w.shape[1]):
        col = w[:, jn]
        nz = np.nonzero(col)[0]
        if len(nz) and col[nz[0]] < 0:
            signs[jn] = -1.0
            w[:, jn] = -col

    sign_state = np.repeat(signs, sizes)
    z = moments.z_smooth[:, perm] * sign_state
    scale = np.outer(sign_state, sign_state)
    p_s = moments.p_smooth[:, perm][:, :, perm] * scale
    p_l = moments.p_lag[:, perm][:, :, perm] * scale

    mu0 = params.state_mean(cache.block_sizes)[perm] * sign_state
    sigma0 = params.state_cov(cache.block_sizes)[perm][:, perm] * scale

    new_params = ModelParams(
        beta=params.beta.copy(),
        sigma2=params.sigma2.copy(),
        f=params.f[order].copy(),
        w=w,
        kappa=params.kappa[order].copy(),
        mu0=mu0,
        sigma0=sigma0,
    )
    new_moments = SmootherMoments(z, p_s, p_l)
    meshes = [cache.meshes[j] for j in order]
    return new_params, new_moments, meshes


# ---------------------------------------------------------------------------
# initialization and the EM loop
# ---------------------------------------------------------------------------

def random_init(panel: ObservationPanel, q: int, seed: int, ranges: dict | None = None) -> ModelParams:
    """Random starting point with the reference simulation-study ranges."""
    r = dict(
        beta=(0.0, 1.0),
        f_pos=(0.2, 0.8),
        f_neg=(-0.8, -0.2),
        w=(0.2, 2.0),
        kappa=(_SQRT8, 7 * _SQRT8),
        sigma2=(0.1, 2.0),
    )
    if ranges:
        r.update(ranges)
    rng = rng_stream(seed, "init", 0)
    b = sum(panel.n_covariates)
    f = np.array(
        [
            rng.uniform(*(r["f_pos"] if j % 2 == 0 else r["f_neg"]))
            for j in range(q)
        ]
    )
    return ModelParams(
        beta=rng.uniform(*r["beta"], size=b),
        sigma2=rng.uniform(*r["sigma2"], size=panel.p),
        f=f,
        w=rng.uniform(*r["w"], size=(panel.p, q)),
        kappa=rng.uniform(*r["kappa"], size=q),
        mu0=None,
        sigma0=None,
    )


def fit(panel: ObservationPanel, meshes, config: EmConfig | None = None) -> FitResult:
    """Full EM loop; stops on relative log-likelihood change or max_iter."""
    if config is None:
        config = EmConfig()
    config.validate()
    if panel.n_obs() == 0:
        raise NoObservationsForVariable("panel has no observations")
    meshes = list(meshes)
    cache = BasisCache(meshes, panel)

    params = config.init if config.init is not None else random_init(
        panel, len(meshes), config.rng_seed, config.init_ranges
    )
    params.validate()

    t_start = time.perf_counter()
    trace: list = []
    moments = None
    converged = False

    for _ in range(config.max_iter):
        moments, loglik = e_step(params, panel, cache)
        trace.append(loglik)
        if len(trace) >= 2:
            prev = trace[-2]
            if abs(loglik - prev) / max(abs(prev), 1e-300) < config.rel_tol:
                converged = True
                break

        new_beta = update_beta(moments, panel, cache, params)
        params = ModelParams(
            beta=new_beta, sigma2=params.sigma2, f=params.f, w=params.w,
            kappa=params.kappa, mu0=params.mu0, sigma0=params.sigma0,
        )
        params.sigma2 = update_sigma2(moments, panel, cache, params)
        params.w = update_w(moments, panel, cache, params)
        stats = sufficient_stats(moments)
        params.f = _update_f_from_stats(stats[1], stats[2], params, cache)
        new_kappa = params.kappa.copy()
        for j in range(cache.q):
            try:
                new_kappa[j] = update_kappa(moments, params, cache, j, config, stats=stats)
            except Exception as exc:  # keep previous kappa and continue
                warnings.warn(f"kappa update failed for component {j}: {exc}")
        params.kappa = new_kappa
        params.mu0, params.sigma0 = update_initial(moments)

    if moments is None:
        moments, loglik = e_step(params, panel, cache)
        trace.append(loglik)

    params, moments, meshes_out = apply_identifiability(params, moments, cache)
    return FitResult(
        params=params,
        loglik_trace=trace,
        iterations=len(trace),
        converged=converged,
        moments=moments,
        meshes=meshes_out,
        wall_time=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# report serialization
# ---------------------------------------------------------------------------

def write_report(result: FitResult, path) -> None:
    """Key/value text report of a fit."""
    p = result.params
    with open(path, "w") as fh:
        fh.write("lrssm-fit v1\n")
        fh.write(f"converged = {str(result.converged).lower()}\n")
        fh.write(f"iterations = {result.iterations}\n")
        fh.write(f"wall_time_s = {result.wall_time:.3f}\n")
        fh.write(f"loglik = {result.loglik_trace[-1]:.17g}\n")
        for name, arr in [
            ("beta", p.beta),
            ("sigma2", p.sigma2),
            ("f", p.f),
            ("kappa", p.kappa),
        ]:
            fh.write(f"{name} = {' '.join(f'{v:.17g}' for v in arr)}\n")
        for i in range(p.p):
            fh.write(f"w_{i + 1} = {' '.join(f'{v:.17g}' for v in p.w[i])}\n")
        fh.write(
            "loglik_trace = " + " ".join(f"{v:.17g}" for v in result.loglik_trace) + "\n"
        )


def read_report(path) -> dict:
    """Parse a fit report back into a dict of floats/arrays."""
    out: dict = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "lrssm-fit v1":
            raise ValueError(f"not a fit report: {header}")
        for line in fh:
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key == "converged":
                out[key] = value == "true"
            elif key == "iterations":
                out[key] = int(value)
            else:
                vals = [float(v) for v in value.split()]
                out[key] = vals[0] if len(vals) == 1 else np.array(vals)
    return out
