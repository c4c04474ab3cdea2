"""Monte Carlo simulation-study harness: replicate pipeline (simulate, mesh,
fit, validate) and bias/RMSE aggregation."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import em
from .mesh import decimate, delaunay_triangulate, extend_boundary, laplacian_smooth
from .model import ModelParams, ObservationPanel, PanelBlock, rng_stream, simulate_exact
from .predict import validate

_SQRT8 = math.sqrt(8.0)


def reference_params() -> ModelParams:
    """The synthetic-experiment generating parameters (p=3, q=2)."""
    return ModelParams(
        beta=np.array([1.0, 2.0, -1.0]),
        sigma2=np.array([0.5, 1.5, 1.0]),
        f=np.array([0.85, -0.5]),
        w=np.array([[0.5, 1.0], [0.5, 0.25], [0.2, 0.8]]),
        kappa=np.array([7 * _SQRT8, 2 * _SQRT8]),
        mu0=np.ones(2),
        sigma0=np.ones(2),
    )


def unit_lattice(n: int = 25) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(grid, grid)
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class ScenarioConfig:
    m: int = 100
    T: int = 50
    lr: float = 1.0
    replicates: int = 20
    seed: int = 0
    lattice_n: int = 25
    theta_min: float = 0.15
    max_sweeps: int = 10
    buffer_kappa: float = 2 * _SQRT8   # buffer_width = two Matérn ranges at this kappa
    ring_spacing: float | None = None
    em: em.EmConfig = field(default_factory=em.EmConfig)
    params: ModelParams = field(default_factory=reference_params)

    @property
    def name(self) -> str:
        return f"m{self.m}_T{self.T}_LR{int(round(self.lr * 100))}"


@dataclass
class ReplicateResult:
    params: ModelParams
    rmse_train: float
    rmse_test: float
    runtime_s: float
    iterations: int
    converged: bool
    loglik_trace: list
    fit_time_s: float


def split_panel(panel: ObservationPanel, train_idx) -> tuple:
    """Split a full-lattice panel into train/test by per-variable site rows."""
    train = ObservationPanel(p=panel.p, T=panel.T, n_covariates=list(panel.n_covariates))
    test = ObservationPanel(p=panel.p, T=panel.T, n_covariates=list(panel.n_covariates))
    for (i, t), blk in panel.blocks.items():
        keep = np.zeros(len(blk.y), dtype=bool)
        keep[train_idx[i]] = True
        if keep.any():
            train.blocks[(i, t)] = PanelBlock(blk.sites[keep], blk.y[keep], blk.x[keep])
        if (~keep).any():
            test.blocks[(i, t)] = PanelBlock(blk.sites[~keep], blk.y[~keep], blk.x[~keep])
    return train, test


def build_study_mesh(train_sites, r_target: int, cfg: ScenarioConfig, smooth: bool = True):
    """Mesh pipeline on the union of training sites: triangulate, decimate to
    r_target, smooth, and buffer-extend.

    At full rank smoothing is skipped (``smooth=False``) so the remaining
    vertices stay exactly on observation sites."""
    union = np.unique(np.vstack(train_sites), axis=0)
    mesh = delaunay_triangulate(union)
    if r_target < mesh.n_vertices:
        mesh = decimate(mesh, r_target)
    if smooth:
        mesh = laplacian_smooth(mesh, cfg.theta_min, cfg.max_sweeps).mesh
    buffer_width = 2 * _SQRT8 / cfg.buffer_kappa
    return extend_boundary(mesh, buffer_width, cfg.ring_spacing)


def run_replicate(cfg: ScenarioConfig, rep: int) -> ReplicateResult:
    t0 = time.perf_counter()
    seed = int(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(97, rep)).generate_state(1)[0]
        % 2**31
    )
    lattice = unit_lattice(cfg.lattice_n)
    n_sites = len(lattice)
    rng = rng_stream(seed, "sites", 0)
    # an independent random m-subset of the lattice per variable (fully
    # heterotopic training design); the complement is the test set
    train_idx = [
        np.sort(rng.choice(n_sites, size=cfg.m, replace=False))
        for _ in range(cfg.params.p)
    ]
    panel_full, _ = simulate_exact(cfg.params, [lattice] * cfg.params.p, cfg.T, seed)
    panel_train, panel_test = split_panel(panel_full, train_idx)

    r_target = int(round(cfg.lr * cfg.m))
    mesh = build_study_mesh(
        [lattice[idx] for idx in train_idx], r_target, cfg, smooth=cfg.lr < 1.0
    )

    em_cfg = em.EmConfig(
        max_iter=cfg.em.max_iter,
        rel_tol=cfg.em.rel_tol,
        kappa_bounds=cfg.em.kappa_bounds,
        kappa_tol=cfg.em.kappa_tol,
        init=cfg.em.init,
        init_ranges=cfg.em.init_ranges,
        rng_seed=seed,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = em.fit(panel_train, [mesh, mesh], em_cfg)
        from .model import BasisCache

        cache = BasisCache(result.meshes, panel_train)
        report = validate(result.params, result.moments, panel_train, panel_test, cache)
    return ReplicateResult(
        params=result.params,
        rmse_train=report.rmse_train_pooled,
        rmse_test=report.rmse_test_pooled,
        runtime_s=time.perf_counter() - t0,
        iterations=result.iterations,
        converged=result.converged,
        loglik_trace=list(result.loglik_trace),
        fit_time_s=result.wall_time,
    )


PARAM_GROUPS = ("beta", "sigma2", "k", "w", "f")


def _flatten(params: ModelParams) -> dict:
    """Scalar parameter map; W entries in column-major (vec) order."""
    out = {}
    for i, v in enumerate(params.beta):
        out[f"beta_{i + 1}"] = v
    for i, v in enumerate(params.sigma2):
        out[f"sigma2_{i + 1}"] = v
    for i, v in enumerate(params.kappa):
        out[f"k_{i + 1}"] = v
    for idx, v in enumerate(params.w.flatten(order="F")):
        out[f"w_{idx + 1}"] = v
    for i, v in enumerate(params.f):
        out[f"f_{i + 1}"] = v
    return out


def aggregate(results, truth: ModelParams, scenario: str):
    """Bias per scalar parameter and per-group RMSE (per-scalar normalised),
    one output row per scalar parameter."""
    truth_flat = _flatten(truth)
    est = [_flatten(r.params) for r in results]
    n_ok = len(results)
    rmse_train = float(np.mean([r.rmse_train for r in results]))
    rmse_test = float(np.mean([r.rmse_test for r in results]))
    runtime = float(np.mean([r.runtime_s for r in results]))

    group_of = {}
    for name in truth_flat:
        group_of[name] = name.rsplit("_", 1)[0]
    group_rmse = {}
    for group in PARAM_GROUPS:
        names = [n for n in truth_flat if group_of[n] == group]
        sq = [
            (e[n] - truth_flat[n]) ** 2 for e in est for n in names
        ]
        group_rmse[group] = math.sqrt(float(np.mean(sq))) if sq else float("nan")

    rows = []
    for name, true_val in truth_flat.items():
        bias = float(np.mean([e[name] for e in est]) - true_val)
        rows.append(
            {
                "scenario": scenario,
                "param": name,
                "bias": bias,
                "rmse": group_rmse[group_of[name]],
                "rmse_train": rmse_train,
                "rmse_test": rmse_test,
                "runtime_s": runtime,
                "n_ok": n_ok,
            }
        )
    return rows


def run_replicates(cfg: ScenarioConfig, threads: int = 1):
    """Run all replicates, tolerating per-replicate failures.

    Returns (results, failure messages)."""
    results = []
    failures = []
    if threads > 1:
        import multiprocessing as mp

        with mp.Pool(threads) as pool:
            handles = [
                pool.apply_async(run_replicate, (cfg, rep))
                for rep in range(cfg.replicates)
            ]
            for rep, h in enumerate(handles):
                try:
                    results.append(h.get())
                except Exception as exc:
                    failures.append(f"replicate {rep}: {exc}")
    else:
        for rep in range(cfg.replicates):
            try:
                results.append(run_replicate(cfg, rep))
            except Exception as exc:
                failures.append(f"replicate {rep}: {exc}")
    return results, failures


def run_study(cfg: ScenarioConfig, threads: int = 1):
    """Run all replicates (partial-failure tolerant) and aggregate.

    Returns (rows, n_failed, messages)."""
    results, failures = run_replicates(cfg, threads)
    if not results:
        raise RuntimeError("every replicate failed: " + "; ".join(failures))
    rows = aggregate(results, cfg.params, cfg.name)
    return rows, len(failures), failures


def write_study_csv(rows, path) -> None:
    import csv

    cols = ["scenario", "param", "bias", "rmse", "rmse_train", "rmse_test", "runtime_s", "n_ok"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
