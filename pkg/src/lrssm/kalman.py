"""Exact Gaussian inference for the low-rank state-space model.

The state stacks the q component fields at their latent mesh vertices. The
filter runs the standard prediction/update recursions with a time-varying
observation dimension (missing data enters as dropped rows), the smoother the
backward recursions including the lag-one covariance chain, and a dense
joint-Gaussian oracle provides an independent reference for small instances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import (
    DimensionTooLarge,
    SingularInnovationCovariance,
    SingularPredictedCovariance,
)
from .model import BasisCache, ModelParams, ObservationPanel, build_loading


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


@dataclass
class FilterOutput:
    """Forward-pass quantities; index t runs 0..T for filtered moments and
    1..T (list offset t-1) for per-step arrays."""

    z_filt: np.ndarray        # (T+1, N)
    p_filt: np.ndarray        # (T+1, N, N)
    z_pred: np.ndarray        # (T, N), prediction for t = 1..T
    p_pred: np.ndarray        # (T, N, N)
    gains: list               # per t: (N, m_t) or None
    innovations: list         # per t: (m_t,)
    innovation_covs: list     # per t: (m_t, m_t) or None
    loadings: list            # per t: sparse loading matrix or None
    loglik: float
    loglik_terms: list | None = None  # per-t contributions (debug dump)

    @property
    def T(self) -> int:
        return len(self.z_pred)


@dataclass
class SmootherMoments:
    """Smoothed means/covariances for t = 0..T and lag-one covariances
    Cov(z_t, z_{t-1} | y) stored at index t-1 for t = 1..T."""

    z_smooth: np.ndarray      # (T+1, N)
    p_smooth: np.ndarray      # (T+1, N, N)
    p_lag: np.ndarray         # (T, N, N)


def state_transition(params: ModelParams, block_sizes) -> np.ndarray:
    """Diagonal of the state transition matrix (f_j repeated per block)."""
    return np.repeat(params.f, block_sizes)


def innovation_cov(qinv_blocks) -> np.ndarray:
    """Dense block-diagonal innovation covariance from per-component blocks."""
    return linalg.block_diag(*qinv_blocks)


def kalman_filter(
    params: ModelParams,
    panel: ObservationPanel,
    cache: BasisCache,
    qinv_blocks,
) -> FilterOutput:
    """Forward Kalman recursions with prediction-error log-likelihood."""
    params.validate()
    sizes = cache.block_sizes
    n = cache.state_dim
    fdiag = state_transition(params, sizes)
    q_cov = innovation_cov(qinv_blocks)
    T = panel.T

    z_filt = np.zeros((T + 1, n))
    p_filt = np.zeros((T + 1, n, n))
    z_pred = np.zeros((T, n))
    p_pred = np.zeros((T, n, n))
    gains: list = []
    innovations: list = []
    innovation_covs: list = []
    loadings: list = []

    z_filt[0] = params.state_mean(sizes)
    p_filt[0] = _sym(params.state_cov(sizes))
    loglik = 0.0
    loglik_terms = []

    for t in range(1, T + 1):
        zp = fdiag * z_filt[t - 1]
        pp = _sym(fdiag[:, None] * p_filt[t - 1] * fdiag[None, :] + q_cov)
        z_pred[t - 1] = zp
        p_pred[t - 1] = pp

        m_t = panel.m_t(t)
        if m_t == 0:
            z_filt[t] = zp
            p_filt[t] = pp
            gains.append(None)
            innovations.append(np.empty(0))
            innovation_covs.append(None)
            loadings.append(None)
            loglik_terms.append(0.0)
            continue

        psi = build_loading(params.w, cache, t)
        y, _, _ = panel.stacked(t)
        offset = panel.mean_offset(params, t)
        innov = y - offset - psi @ zp

        psi_p = np.asarray(psi @ pp)          # (m, N)
        sigma_eps = np.asarray(psi @ psi_p.T)  # Psi P Psi' (P symmetric)
        noise = np.repeat(params.sigma2, [panel.m(i, t) for i in range(panel.p)])
        sigma_eps[np.diag_indices_from(sigma_eps)] += noise
        sigma_eps = _sym(sigma_eps)

        def _factor(mat):
            try:
                c = linalg.cho_factor(mat, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(c[0])):
                return None
            d = np.diag(c[0])
            if (d.max() / d.min()) ** 2 > 1e12:  # condition estimate
                return None
            return c

        cho = _factor(sigma_eps)
        if cho is None:
            # heterotopic panels can duplicate sites; ridge and retry
            ridge = 1e-10 * np.trace(sigma_eps) / m_t
            warnings.warn(
                f"ill-conditioned innovation covariance at t={t}; adding ridge {ridge:.3e}"
            )
            sigma_eps[np.diag_indices_from(sigma_eps)] += ridge
            try:
                cho = linalg.cho_factor(sigma_eps, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise SingularInnovationCovariance(f"t={t}: {exc}") from exc

        gain = linalg.cho_solve(cho, psi_p, check_finite=False).T  # (N, m)
        z_filt[t] = zp + gain @ innov
        p_filt[t] = _sym(pp - gain @ psi_p)

        half = linalg.solve_triangular(
            cho[0], innov, lower=True, check_finite=False
        )
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        term = -0.5 * (m_t * np.log(2 * np.pi) + logdet + half @ half)
        loglik += term
        loglik_terms.append(float(term))

        gains.append(gain)
        innovations.append(innov)
        innovation_covs.append(sigma_eps)
        loadings.append(psi)

    return FilterOutput(
        z_filt, p_filt, z_pred, p_pred, gains, innovations, innovation_covs,
        loadings, float(loglik), loglik_terms,
    )


def kalman_smooth(params: ModelParams, cache: BasisCache, filt: FilterOutput) -> SmootherMoments:
    """Backward recursions with the standard lag-one covariance chain."""
    sizes = cache.block_sizes
    fdiag = state_transition(params, sizes)
    T = filt.T
    n = filt.z_filt.shape[1]

    z_s = filt.z_filt.copy()
    p_s = filt.p_filt.copy()
    js = [None] * T  # J_{t-1} stored at index t-1, t = 1..T

    for t in range(T, 0, -1):
        pf = filt.p_filt[t - 1]
        pp = filt.p_pred[t - 1]
        try:
            # J_{t-1} = P_{t-1}^{t-1} F' (P_t^{t-1})^{-1}
            j = linalg.solve(pp, (pf * fdiag[None, :]).T, assume_a="pos").T
        except np.linalg.LinAlgError as exc:
            raise SingularPredictedCovariance(f"t={t}: {exc}") from exc
        js[t - 1] = j
        z_s[t - 1] = filt.z_filt[t - 1] + j @ (z_s[t] - filt.z_pred[t - 1])
        p_s[t - 1] = _sym(pf + j @ (p_s[t] - pp) @ j.T)

    p_lag = np.zeros((T, n, n))
    if T >= 1:
        # initialization: P_{T,T-1}^T = (I - K_T Psi_T) F P_{T-1}^{T-1}
        kpsi_f_p = fdiag[:, None] * filt.p_filt[T - 1]
        if filt.gains[T - 1] is not None:
            psi = filt.loadings[T - 1]
            kpsi_f_p = kpsi_f_p - filt.gains[T - 1] @ (psi @ kpsi_f_p)
        p_lag[T - 1] = kpsi_f_p
    for t in range(T, 1, -1):
        # P_{t-1,t-2}^T = P_{t-1}^{t-1} J_{t-2}' + J_{t-1} (P_{t,t-1}^T - F P_{t-1}^{t-1}) J_{t-2}'
        pf = filt.p_filt[t - 1]
        p_lag[t - 2] = (
            pf @ js[t - 2].T
            + js[t - 1] @ (p_lag[t - 1] - fdiag[:, None] * pf) @ js[t - 2].T
        )
    return SmootherMoments(z_s, p_s, p_lag)


# ---------------------------------------------------------------------------
# dense joint-Gaussian oracle
# ---------------------------------------------------------------------------

def dense_oracle(
    params: ModelParams,
    panel: ObservationPanel,
    cache: BasisCache,
    qinv_blocks,
    max_dim: int = 2000,
):
    """Exact joint-Gaussian computation of the observed-data log-likelihood
    and all smoothed moments by block conditioning.

    Brute-force reference: builds Cov(z_{0:T}) by propagating the state
    recursion, augments the observation rows, and conditions. Refuses
    instances beyond ``max_dim`` total dimension.
    """
    params.validate()
    sizes = cache.block_sizes
    n = cache.state_dim
    T = panel.T
    total_obs = sum(panel.m_t(t) for t in range(1, T + 1))
    dim = (T + 1) * n + total_obs
    if dim > max_dim:
        raise DimensionTooLarge(f"oracle dimension {dim} exceeds {max_dim}")

    fdiag = state_transition(params, sizes)
    q_cov = innovation_cov(qinv_blocks)

    # joint covariance of stacked states z_0..z_T
    nz = (T + 1) * n
    cov_z = np.zeros((nz, nz))
    mean_z = np.zeros(nz)
    mean_z[:n] = params.state_mean(sizes)
    cov_z[:n, :n] = params.state_cov(sizes)
    for t in range(1, T + 1):
        s = t * n
        mean_z[s : s + n] = fdiag * mean_z[s - n : s]
        cov_z[s : s + n, s : s + n] = (
            fdiag[:, None] * cov_z[s - n : s, s - n : s] * fdiag[None, :] + q_cov
        )
        for u in range(0, t):
            r = u * n
            cov_z[r : r + n, s : s + n] = cov_z[r : r + n, s - n : s] * fdiag[None, :]
            cov_z[s : s + n, r : r + n] = cov_z[r : r + n, s : s + n].T

    # stacked observations
    psi_rows = []
    y_all = []
    noise = []
    for t in range(1, T + 1):
        if panel.m_t(t) == 0:
            continue
        psi = build_loading(params.w, cache, t).toarray()
        row = np.zeros((psi.shape[0], nz))
        row[:, t * n : (t + 1) * n] = psi
        psi_rows.append(row)
        y, _, _ = panel.stacked(t)
        y_all.append(y - panel.mean_offset(params, t))
        noise.append(np.repeat(params.sigma2, [panel.m(i, t) for i in range(panel.p)]))
    if psi_rows:
        H = np.vstack(psi_rows)
        resid = np.concatenate(y_all)
        noise = np.concatenate(noise)
    else:
        H = np.zeros((0, nz))
        resid = np.empty(0)
        noise = np.empty(0)

    cov_y = H @ cov_z @ H.T + np.diag(noise)
    cross = cov_z @ H.T
    centered = resid - H @ mean_z

    if len(resid):
        cho = linalg.cho_factor(_sym(cov_y), lower=True)
        half = linalg.solve_triangular(cho[0], centered, lower=True)
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        loglik = -0.5 * (len(resid) * np.log(2 * np.pi) + logdet + half @ half)
        solve_cross = linalg.cho_solve(cho, cross.T)  # (m_all, nz)
        mean_post = mean_z + cross @ linalg.cho_solve(cho, centered)
        cov_post = cov_z - cross @ solve_cross
    else:
        loglik = 0.0
        mean_post = mean_z
        cov_post = cov_z

    z_s = mean_post.reshape(T + 1, n)
    p_s = np.zeros((T + 1, n, n))
    p_lag = np.zeros((T, n, n))
    for t in range(T + 1):
        p_s[t] = _sym(cov_post[t * n : (t + 1) * n, t * n : (t + 1) * n])
    for t in range(1, T + 1):
        p_lag[t - 1] = cov_post[t * n : (t + 1) * n, (t - 1) * n : t * n]
    return float(loglik), SmootherMoments(z_s, p_s, p_lag)
