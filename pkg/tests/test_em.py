import math

import numpy as np
import pytest

from lrssm import em, fem
from lrssm import mesh as msh
from lrssm import model as mdl
from lrssm.kalman import SmootherMoments

from helpers import unit_square_mesh


def sim_instance(seed=0, m=12, T=8, q=1, p=2, mesh_h=0.25, f=None, kappa=None):
    rng = np.random.default_rng(seed)
    mesh = unit_square_mesh(mesh_h)
    params = mdl.ModelParams(
        beta=rng.normal(size=p),
        sigma2=rng.uniform(0.3, 1.0, size=p),
        f=np.asarray(f) if f is not None else rng.uniform(0.3, 0.8, size=q),
        w=rng.uniform(0.5, 1.5, size=(p, q)),
        kappa=np.asarray(kappa) if kappa is not None else rng.uniform(4, 8, size=q),
        mu0=np.zeros(q),
        sigma0=np.ones(q),
    )
    sites = [rng.uniform(0.05, 0.95, size=(m, 2)) for _ in range(p)]
    panel, truth = mdl.simulate_lowrank(params, [mesh] * q, sites, T=T, seed=seed)
    cache = mdl.BasisCache([mesh] * q, panel)
    return params, panel, cache, truth


class TestEStep:
    def test_true_params_beat_perturbed(self):
        wins = 0
        for trial in range(20):
            params, panel, cache, _ = sim_instance(seed=100 + trial)
            _, ll_true = em.e_step(params, panel, cache)
            assert np.isfinite(ll_true)
            perturbed = mdl.ModelParams(
                beta=params.beta + 0.5, sigma2=params.sigma2, f=params.f,
                w=params.w, kappa=params.kappa, mu0=params.mu0, sigma0=params.sigma0,
            )
            _, ll_bad = em.e_step(perturbed, panel, cache)
            wins += ll_true >= ll_bad
        assert wins >= 18

    def test_deterministic(self):
        params, panel, cache, _ = sim_instance(seed=5)
        m1, l1 = em.e_step(params, panel, cache)
        m2, l2 = em.e_step(params, panel, cache)
        assert l1 == l2
        assert np.array_equal(m1.z_smooth, m2.z_smooth)
        assert np.array_equal(m1.p_smooth, m2.p_smooth)

    def test_no_data_prior_moments(self):
        params, panel, cache, _ = sim_instance(seed=6, T=1)
        empty = mdl.ObservationPanel(p=panel.p, T=1, n_covariates=list(panel.n_covariates))
        cache2 = mdl.BasisCache(cache.meshes, empty)
        moments, _ = em.e_step(params, empty, cache2)
        mu = params.state_mean(cache2.block_sizes)
        assert np.allclose(moments.z_smooth[0], mu)
        assert np.allclose(
            moments.p_smooth[0], params.state_cov(cache2.block_sizes), atol=1e-12
        )


class TestUpdateBeta:
    def test_wls_oracle_when_w_zero(self):
        params, panel, cache, _ = sim_instance(seed=7, m=20, T=12)
        params.w = np.zeros_like(params.w)
        moments, _ = em.e_step(params, panel, cache)
        beta = em.update_beta(moments, panel, cache, params)
        # independent per-variable WLS (noise variance cancels per variable)
        start = 0
        for i in range(panel.p):
            xs, ys = [], []
            for t in range(1, panel.T + 1):
                blk = panel.block(i, t)
                if blk is None:
                    continue
                xs.append(blk.x)
                ys.append(blk.y - (em.loading_row(params.w, cache, i, t) @ moments.z_smooth[t]))
            X = np.vstack(xs)
            Y = np.concatenate(ys)
            ref, *_ = np.linalg.lstsq(X, Y, rcond=None)
            b = panel.n_covariates[i]
            assert np.allclose(beta[start : start + b], ref, atol=1e-10)
            start += b

    def test_exact_interpolation(self):
        params, panel, cache, _ = sim_instance(seed=8)
        # rebuild observations as exactly X beta0 and zero out the state
        beta0 = np.array([0.7, -1.2])
        betas = dict(zip(range(panel.p), beta0))
        for (i, t), blk in panel.blocks.items():
            blk.y = blk.x @ np.atleast_1d(betas[i])
        zero_moments = SmootherMoments(
            np.zeros_like(np.zeros((panel.T + 1, cache.state_dim))),
            np.zeros((panel.T + 1, cache.state_dim, cache.state_dim)),
            np.zeros((panel.T, cache.state_dim, cache.state_dim)),
        )
        beta = em.update_beta(zero_moments, panel, cache, params)
        assert np.allclose(beta, beta0, atol=1e-12)

    def test_noise_scale_invariance(self):
        params, panel, cache, _ = sim_instance(seed=9)
        moments, _ = em.e_step(params, panel, cache)
        b1 = em.update_beta(moments, panel, cache, params)
        scaled = mdl.ModelParams(
            beta=params.beta, sigma2=3.7 * params.sigma2, f=params.f,
            w=params.w, kappa=params.kappa, mu0=params.mu0, sigma0=params.sigma0,
        )
        b2 = em.update_beta(moments, panel, cache, scaled)
        assert np.allclose(b1, b2, atol=1e-12)


class TestUpdateSigma2:
    def test_zero_residuals_zero_variance(self):
        params, panel, cache, _ = sim_instance(seed=10)
        betas = params.beta_blocks(panel.n_covariates)
        zero_moments = SmootherMoments(
            np.zeros((panel.T + 1, cache.state_dim)),
            np.zeros((panel.T + 1, cache.state_dim, cache.state_dim)),
            np.zeros((panel.T, cache.state_dim, cache.state_dim)),
        )
        for (i, t), blk in panel.blocks.items():
            blk.y = blk.x @ betas[i]
        s2 = em.update_sigma2(zero_moments, panel, cache, params)
        assert np.allclose(s2, 0.0, atol=1e-15)

    def test_w_zero_mean_squared_residual(self):
        params, panel, cache, _ = sim_instance(seed=11)
        params.w = np.zeros_like(params.w)
        moments, _ = em.e_step(params, panel, cache)
        s2 = em.update_sigma2(moments, panel, cache, params)
        betas = params.beta_blocks(panel.n_covariates)
        for i in range(panel.p):
            acc, count = 0.0, 0
            for t in range(1, panel.T + 1):
                blk = panel.block(i, t)
                if blk is None:
                    continue
                r = blk.y - blk.x @ betas[i]
                acc += r @ r
                count += len(r)
            assert s2[i] == pytest.approx(acc / count, rel=1e-12)


class TestUpdateF:
    def _moments_from_sequence(self, z_seq, n):
        T = len(z_seq) - 1
        return SmootherMoments(
            np.asarray(z_seq),
            np.zeros((T + 1, n, n)),
            np.zeros((T, n, n)),
        )

    def test_noiseless_ar_recovery(self):
        params, panel, cache, _ = sim_instance(seed=12, q=1)
        n = cache.state_dim
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal(n)
        z_seq = [z0]
        for _ in range(10):
            z_seq.append(0.7 * z_seq[-1])
        moments = self._moments_from_sequence(z_seq, n)
        f = em.update_f(moments, params, cache)
        assert f[0] == pytest.approx(0.7, abs=1e-12)

    def test_negative_sign_recovery(self):
        params, panel, cache, _ = sim_instance(seed=13, q=1)
        n = cache.state_dim
        rng = np.random.default_rng(1)
        z_seq = [rng.standard_normal(n)]
        for _ in range(10):
            z_seq.append(-0.5 * z_seq[-1])
        moments = self._moments_from_sequence(z_seq, n)
        f = em.update_f(moments, params, cache)
        assert f[0] == pytest.approx(-0.5, abs=1e-12)

    def test_clamped_into_stationary_region(self):
        params, panel, cache, _ = sim_instance(seed=14, q=1)
        n = cache.state_dim
        z_seq = [np.ones(n)]
        for _ in range(5):
            z_seq.append(1.3 * z_seq[-1])  # explosive input
        moments = self._moments_from_sequence(z_seq, n)
        f = em.update_f(moments, params, cache)
        assert abs(f[0]) < 1


class TestUpdateW:
    def test_ols_slope_scalar_latent(self):
        params, panel, cache, _ = sim_instance(seed=15, q=1, p=1)
        rng = np.random.default_rng(2)
        n = cache.state_dim
        z = rng.standard_normal((panel.T + 1, n))
        moments = SmootherMoments(
            z, np.zeros((panel.T + 1, n, n)), np.zeros((panel.T, n, n))
        )
        betas = params.beta_blocks(panel.n_covariates)
        num = den = 0.0
        for t in range(1, panel.T + 1):
            blk = panel.block(0, t)
            psi = cache.psi(0, t)[0]
            proj = psi @ z[t]
            resid = blk.y - blk.x @ betas[0]
            num += resid @ proj
            den += proj @ proj
        w = em.update_w(moments, panel, cache, params)
        assert w[0, 0] == pytest.approx(num / den, rel=1e-12)

    def test_orthogonal_residuals_zero_w(self):
        params, panel, cache, _ = sim_instance(seed=16, q=1, p=1)
        n = cache.state_dim
        betas = params.beta_blocks(panel.n_covariates)
        for (i, t), blk in panel.blocks.items():
            blk.y = blk.x @ betas[i]  # residual identically zero
        z = np.ones((panel.T + 1, n))
        moments = SmootherMoments(
            z, np.zeros((panel.T + 1, n, n)), np.zeros((panel.T, n, n))
        )
        w = em.update_w(moments, panel, cache, params)
        assert np.allclose(w, 0.0, atol=1e-12)


class TestUpdateKappa:
    def _synthetic_moments(self, mesh, kappa, f, T, seed):
        mats = fem.assemble(mesh)
        prec = fem.precision(mesh, mats, kappa)
        chol = np.linalg.cholesky(prec.unit_cov() + 1e-12 * np.eye(prec.n))
        rng = np.random.default_rng(seed)
        n = prec.n
        z = np.zeros((T + 1, n))
        for t in range(1, T + 1):
            z[t] = f * z[t - 1] + chol @ rng.standard_normal(n)
        return SmootherMoments(
            z, np.zeros((T + 1, n, n)), np.zeros((T, n, n))
        )

    def test_argmin_recovers_kappa(self):
        rng = np.random.default_rng(3)
        mesh = msh.delaunay_triangulate(rng.uniform(size=(100, 2)))
        kappa_true = 6.0
        panel = mdl.ObservationPanel(p=1, T=1, n_covariates=[1])
        cache = mdl.BasisCache([mesh], panel)
        moments = self._synthetic_moments(mesh, kappa_true, 0.0, T=200, seed=4)
        params = mdl.ModelParams(
            beta=np.zeros(1), sigma2=np.ones(1), f=np.zeros(1),
            w=np.ones((1, 1)), kappa=np.array([3.0]),
        )
        config = em.EmConfig()
        k = em.update_kappa(moments, params, cache, 0, config)
        assert k == pytest.approx(kappa_true, rel=0.05)

    def test_bracket_unimodal(self):
        rng = np.random.default_rng(5)
        mesh = msh.delaunay_triangulate(rng.uniform(size=(40, 2)))
        panel = mdl.ObservationPanel(p=1, T=1, n_covariates=[1])
        cache = mdl.BasisCache([mesh], panel)
        kappa_true = 5.0
        hits = 0
        for trial in range(40):
            moments = self._synthetic_moments(mesh, kappa_true, 0.0, T=60, seed=trial)
            s11, s10, s00 = em.sufficient_stats(moments)
            a_mat = s11
            T = moments.p_lag.shape[0]
            vals = [
                em.kappa_objective(k, a_mat, T, cache, 0)
                for k in (kappa_true / 2, kappa_true, kappa_true * 2)
            ]
            hits += vals[1] < vals[0] and vals[1] < vals[2]
        assert hits >= 38  # >= 95% of 40 trials

    def test_doubling_stats_doubles_objective(self):
        rng = np.random.default_rng(6)
        mesh = msh.delaunay_triangulate(rng.uniform(size=(25, 2)))
        panel = mdl.ObservationPanel(p=1, T=1, n_covariates=[1])
        cache = mdl.BasisCache([mesh], panel)
        moments = self._synthetic_moments(mesh, 4.0, 0.3, T=30, seed=7)
        s11, _, _ = em.sufficient_stats(moments)
        g1 = em.kappa_objective(5.0, s11, 30, cache, 0)
        g2 = em.kappa_objective(5.0, 2 * s11, 60, cache, 0)
        assert g2 == pytest.approx(2 * g1, rel=1e-12)


class TestUpdateInitial:
    def test_copies_smoothed_initial(self):
        params, panel, cache, _ = sim_instance(seed=17)
        moments, _ = em.e_step(params, panel, cache)
        mu0, sigma0 = em.update_initial(moments)
        assert np.array_equal(mu0, moments.z_smooth[0])
        assert np.array_equal(sigma0, moments.p_smooth[0])
        # PSD inherited; idempotent across calls
        np.linalg.cholesky(sigma0 + 1e-10 * np.eye(len(sigma0)))
        mu0b, sigma0b = em.update_initial(moments)
        assert np.array_equal(mu0, mu0b)
        assert np.array_equal(sigma0, sigma0b)


class TestMStepOptimality:
    def test_each_update_does_not_increase_q(self):
        for seed in (20, 21, 22):
            params, panel, cache, _ = sim_instance(seed=seed, m=8, T=5, q=2)
            # start away from the truth
            start = mdl.ModelParams(
                beta=params.beta + 0.3,
                sigma2=params.sigma2 * 1.5,
                f=params.f * 0.5,
                w=params.w * 0.7,
                kappa=params.kappa * 1.3,
                mu0=params.mu0,
                sigma0=params.sigma0,
            )
            moments, _ = em.e_step(start, panel, cache)
            current = start
            q0 = em.q_objective(current, moments, panel, cache)

            def updated(**kw):
                base = dict(
                    beta=current.beta, sigma2=current.sigma2, f=current.f,
                    w=current.w, kappa=current.kappa, mu0=current.mu0,
                    sigma0=current.sigma0,
                )
                base.update(kw)
                return mdl.ModelParams(**base)

            current = updated(beta=em.update_beta(moments, panel, cache, current))
            q1 = em.q_objective(current, moments, panel, cache)
            assert q1 <= q0 + 1e-8
            current = updated(sigma2=em.update_sigma2(moments, panel, cache, current))
            q2 = em.q_objective(current, moments, panel, cache)
            assert q2 <= q1 + 1e-8
            current = updated(w=em.update_w(moments, panel, cache, current))
            q3 = em.q_objective(current, moments, panel, cache)
            assert q3 <= q2 + 1e-8
            current = updated(f=em.update_f(moments, current, cache))
            q4 = em.q_objective(current, moments, panel, cache)
            assert q4 <= q3 + 1e-8
            cfg = em.EmConfig()
            kap = current.kappa.copy()
            for j in range(cache.q):
                kap[j] = em.update_kappa(moments, current, cache, j, cfg)
            current = updated(kappa=kap)
            q5 = em.q_objective(current, moments, panel, cache)
            assert q5 <= q4 + 1e-8
            mu0, sigma0 = em.update_initial(moments)
            current = updated(mu0=mu0, sigma0=sigma0 + 1e-10 * np.eye(len(sigma0)))
            q6 = em.q_objective(current, moments, panel, cache)
            assert q6 <= q5 + 1e-6


class TestFit:
    def test_monotone_loglik_and_convergence(self):
        params, panel, cache, _ = sim_instance(seed=30, m=15, T=10)
        cfg = em.EmConfig(max_iter=25, rng_seed=1)
        result = em.fit(panel, cache.meshes, cfg)
        trace = np.asarray(result.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-8)
        assert result.iterations == len(trace)

    def test_true_init_converges_faster(self):
        iters_true, iters_rand = [], []
        for seed in range(10):
            params, panel, cache, _ = sim_instance(seed=40 + seed, m=10, T=8)
            cfg_t = em.EmConfig(max_iter=60, init=params)
            cfg_r = em.EmConfig(max_iter=60, rng_seed=seed)
            iters_true.append(em.fit(panel, cache.meshes, cfg_t).iterations)
            iters_rand.append(em.fit(panel, cache.meshes, cfg_r).iterations)
        assert np.median(iters_true) <= np.median(iters_rand)

    def test_identifiability_convention(self):
        params, panel, cache, _ = sim_instance(seed=50, m=12, T=10, q=2)
        cfg = em.EmConfig(max_iter=8, rng_seed=3)
        result = em.fit(panel, cache.meshes, cfg)
        f = result.params.f
        assert np.all(np.diff(f) <= 0)  # descending
        for col in result.params.w.T:
            nz = col[np.nonzero(col)[0]]
            if len(nz):
                assert nz[0] > 0

    def test_identifiability_transform_preserves_fit(self):
        params, panel, cache, _ = sim_instance(seed=51, m=10, T=6, q=2)
        moments, _ = em.e_step(params, panel, cache)
        flipped = mdl.ModelParams(
            beta=params.beta, sigma2=params.sigma2,
            f=params.f[::-1].copy(),
            w=-params.w[:, ::-1].copy(),
            kappa=params.kappa[::-1].copy(),
            mu0=params.mu0[::-1].copy() if params.mu0 is not None else None,
            sigma0=params.sigma0[::-1].copy() if params.sigma0 is not None else None,
        )
        mo_f, _ = em.e_step(flipped, panel, cache)
        new_params, new_moments, meshes = em.apply_identifiability(flipped, mo_f, cache)
        # fitted observation surface is invariant
        for t in (1, panel.T):
            cache2 = mdl.BasisCache(meshes, panel)
            before = mdl.build_loading(flipped.w, cache, t) @ mo_f.z_smooth[t]
            after = mdl.build_loading(new_params.w, cache2, t) @ new_moments.z_smooth[t]
            assert np.allclose(before, after, atol=1e-10)


class TestReportRoundtrip:
    def test_roundtrip(self, tmp_path):
        params, panel, cache, _ = sim_instance(seed=60, m=8, T=5)
        cfg = em.EmConfig(max_iter=3, init=params)
        result = em.fit(panel, cache.meshes, cfg)
        path = tmp_path / "fit.txt"
        em.write_report(result, path)
        back = em.read_report(path)
        assert back["iterations"] == result.iterations
        assert np.allclose(back["beta"], result.params.beta)
        assert np.allclose(back["f"], np.atleast_1d(result.params.f))
        assert back["loglik"] == pytest.approx(result.loglik_trace[-1])
