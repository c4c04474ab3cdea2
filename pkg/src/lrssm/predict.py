"""Plug-in prediction at new sites, raster map generation, and validation
metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import PointOutsideMesh
from .kalman import SmootherMoments
from .model import BasisCache, ModelParams, ObservationPanel, latent_basis_matrix


def point_basis(meshes, point):
    """Per-component latent basis rows of one point (1 x R_j sparse each)."""
    return [latent_basis_matrix(mesh, [point]) for mesh in meshes]


def predict(
    params: ModelParams,
    moments: SmootherMoments,
    meshes,
    point,
    t: int,
    covariates=None,
    include_noise: bool = False,
):
    """Plug-in mean and latent covariance of the p variables at one site/time.

    ``covariates`` is one coefficient-length vector per variable (or None for
    a zero design, e.g. latent-effect maps). By default the covariance is the
    latent-only plug-in form; ``include_noise`` adds diag(sigma2) for
    predictive rather than latent-effect intervals.
    """
    meshes = list(meshes)
    q = len(meshes)
    rows = point_basis(meshes, point)
    sizes = [m.n_latent for m in meshes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    z_t = moments.z_smooth[t]
    p_t = moments.p_smooth[t]
    v = np.array(
        [(rows[j] @ z_t[offsets[j] : offsets[j + 1]])[0] for j in range(q)]
    )
    proj = np.zeros((q, q))
    for j in range(q):
        for k in range(q):
            block = p_t[offsets[j] : offsets[j + 1], offsets[k] : offsets[k + 1]]
            proj[j, k] = (rows[j] @ (block @ rows[k].T.toarray().ravel()))[0]

    mean = params.w @ v
    if covariates is not None:
        betas = params.beta_blocks([len(c) for c in covariates])
        mean = mean + np.array(
            [np.dot(covariates[i], betas[i]) for i in range(params.p)]
        )
    cov = params.w @ proj @ params.w.T
    cov = 0.5 * (cov + cov.T)
    if include_noise:
        cov = cov + np.diag(params.sigma2)
    return mean, cov


def raster_map(
    params: ModelParams,
    moments: SmootherMoments,
    meshes,
    bbox,
    nx: int,
    ny: int,
    times=None,
    path=None,
    include_noise: bool = False,
):
    """Row-major raster of latent-effect means and standard deviations.

    ``times`` selects a single time (int), a subset (iterable), or all of
    1..T (None); multiple times are averaged (mean of per-time means, mean of
    per-time variances). Grid cells outside the hull are emitted as NA.
    Returns the list of rows; writes CSV when ``path`` is given.
    """
    x0, y0, x1, y1 = bbox
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    T = moments.z_smooth.shape[0] - 1
    if times is None:
        times = range(1, T + 1)
    elif np.isscalar(times):
        times = [int(times)]
    times = list(times)

    p = params.p
    rows = []
    for y in ys:
        for x in xs:
            try:
                acc_mean = np.zeros(p)
                acc_var = np.zeros(p)
                for t in times:
                    mean, cov = predict(
                        params, moments, meshes, (x, y), t,
                        include_noise=include_noise,
                    )
                    acc_mean += mean
                    acc_var += np.diag(cov)
                mean = acc_mean / len(times)
                sd = np.sqrt(np.maximum(acc_var / len(times), 0.0))
                rows.append([x, y] + list(mean) + list(sd))
            except PointOutsideMesh:
                rows.append([x, y] + ["NA"] * (2 * p))
    if path is not None:
        header = (
            ["x", "y"]
            + [f"mean_{i + 1}" for i in range(p)]
            + [f"sd_{i + 1}" for i in range(p)]
        )
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow(
                    [v if isinstance(v, str) else f"{v:.10g}" for v in row]
                )
    return rows


@dataclass
class ValidationReport:
    """Per-variable and pooled RMSE / R-squared on train and test panels."""

    rmse_train: np.ndarray
    rmse_test: np.ndarray
    r2_train: np.ndarray
    r2_test: np.ndarray
    rmse_train_pooled: float
    rmse_test_pooled: float


def _panel_metrics(params, moments, cache: BasisCache, panel: ObservationPanel):
    from .model import loading_row

    p = panel.p
    betas = params.beta_blocks(panel.n_covariates)
    sse = np.zeros(p)
    count = np.zeros(p, dtype=int)
    # time-mean of per-time spatial means, per variable
    means = np.zeros(p)
    tcount = np.zeros(p, dtype=int)
    sst = np.zeros(p)
    per_time_means = {i: [] for i in range(p)}
    for i in range(p):
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            per_time_means[i].append(blk.y.mean())
        means[i] = np.mean(per_time_means[i]) if per_time_means[i] else 0.0
    for i in range(p):
        for t in range(1, panel.T + 1):
            blk = panel.block(i, t)
            if blk is None or len(blk.y) == 0:
                continue
            row = loading_row(params.w, cache, i, t)
            yhat = blk.x @ betas[i] + row @ moments.z_smooth[t]
            e = blk.y - yhat
            sse[i] += e @ e
            count[i] += len(e)
            sst[i] += np.sum((blk.y - means[i]) ** 2)
    rmse = np.sqrt(np.divide(sse, np.maximum(count, 1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - np.divide(sse, sst, out=np.full(p, np.nan), where=sst > 0)
    pooled = float(np.sqrt(sse.sum() / max(count.sum(), 1)))
    return rmse, r2, pooled


def validate(
    params: ModelParams,
    moments: SmootherMoments,
    panel_train: ObservationPanel,
    panel_test: ObservationPanel,
    cache: BasisCache,
) -> ValidationReport:
    """RMSE and R-squared per variable, on the training panel and a held-out
    test panel, with the plug-in predictions at the smoothed states.

    Test rows without latent basis support (off the latent domain) are
    excluded from the metrics with a warning."""
    import warnings

    from .model import filter_predictable

    rmse_tr, r2_tr, pooled_tr = _panel_metrics(params, moments, cache, panel_train)
    panel_test, dropped = filter_predictable(panel_test, cache.meshes)
    if dropped:
        warnings.warn(f"validation: {dropped} test rows off the latent domain dropped")
    test_cache = BasisCache(cache.meshes, panel_test)
    rmse_te, r2_te, pooled_te = _panel_metrics(params, moments, test_cache, panel_test)
    return ValidationReport(rmse_tr, rmse_te, r2_tr, r2_te, pooled_tr, pooled_te)
