"""Command-line interface: mesh, simulate, fit, predict, validate, study.

Configuration is ``key = value`` text; unknown keys are rejected and every
referenced path must exist at parse time. Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 partial study.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import em, fem, study
from .errors import LrssmError
from .mesh import (
    decimate,
    delaunay_triangulate,
    extend_boundary,
    laplacian_smooth,
    mesh_quality,
    read_mesh,
    write_mesh,
)
from .model import (
    BasisCache,
    ModelParams,
    ObservationPanel,
    simulate_exact,
    simulate_lowrank,
)
from .predict import raster_map, validate

_SQRT8 = math.sqrt(8.0)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
            raw[key] = value.strip()
    return raw


def resolve(schema: dict, raw: dict):
    """Validate raw key/value strings against a schema of
    ``key -> (converter, default)`` where default ``REQUIRED`` marks
    mandatory keys. Unknown keys are rejected."""
    unknown = set(raw) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]} ({exc})") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required config key: {key}")
        else:
            out[key] = default
    return out


REQUIRED = object()


def _path(value: str) -> str:
    if not os.path.exists(value):
        raise ConfigError(f"path does not exist: {value}")
    return value


def _paths(value: str) -> list:
    return [_path(v) for v in value.split(",")]


def _floats(value: str) -> np.ndarray:
    return np.array([float(v) for v in value.split()])


def _bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value}")


def _times(value: str):
    if value == "all":
        return None
    return [int(v) for v in value.split()]


def _out_path(out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_meshes(paths, q: int | None):
    meshes = [read_mesh(p) for p in paths]
    if q is None:
        q = len(meshes)
    if len(meshes) == 1 and q > 1:
        meshes = meshes * q
    if len(meshes) != q:
        raise ConfigError(f"got {len(meshes)} meshes for q = {q}")
    return meshes


def _params_from_report(report: dict) -> ModelParams:
    w_rows = []
    i = 1
    while f"w_{i}" in report:
        w_rows.append(np.atleast_1d(report[f"w_{i}"]))
        i += 1
    n = len(np.atleast_1d(report["mu0"]))
    sigma0 = report["sigma0"].reshape(n, n) if "sigma0" in report else None
    return ModelParams(
        beta=np.atleast_1d(report["beta"]),
        sigma2=np.atleast_1d(report["sigma2"]),
        f=np.atleast_1d(report["f"]),
        w=np.vstack(w_rows),
        kappa=np.atleast_1d(report["kappa"]),
        mu0=np.atleast_1d(report["mu0"]),
        sigma0=sigma0,
    )


def cmd_mesh(args) -> int:
    schema = {
        "panel": (_path, REQUIRED),
        "r_target": (int, 0),            # 0: keep every site
        "lr": (float, 0.0),              # alternative to r_target
        "theta_min": (float, 0.15),
        "max_sweeps": (int, 20),
        "buffer_width": (float, 0.0),    # 0: derive from kappa_init
        "kappa_init": (float, 2 * _SQRT8),
        "ring_spacing": (float, 0.0),    # 0: mean interior edge length
        "out_mesh": (str, "mesh.txt"),
        "seed": (int, 0),
    }
    cfg = resolve(schema, parse_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    panel = ObservationPanel.from_csv(cfg["panel"])
    sites = panel.all_sites()
    mesh = delaunay_triangulate(sites)
    r_target = cfg["r_target"]
    if r_target == 0 and cfg["lr"] > 0:
        r_target = int(round(cfg["lr"] * len(sites)))
    if r_target:
        mesh = decimate(mesh, min(r_target, mesh.n_vertices))
    smooth = laplacian_smooth(mesh, cfg["theta_min"], cfg["max_sweeps"])
    mesh = smooth.mesh
    buffer_width = cfg["buffer_width"] or 2 * _SQRT8 / cfg["kappa_init"]
    ring_spacing = cfg["ring_spacing"] or None
    mesh = extend_boundary(mesh, buffer_width, ring_spacing)
    out = _out_path(args.out, cfg["out_mesh"])
    write_mesh(mesh, out)
    quality = mesh_quality(mesh)
    print(
        f"mesh written to {out}: R={quality.vertex_count} "
        f"min_angle={quality.min_angle:.4f} h={quality.max_edge_h:.4f} "
        f"angle_target_met={str(smooth.target_met).lower()}"
    )
    if args.dump_matrices:
        mats = fem.assemble(mesh)
        for name, matrix in (("mass", mats.mass), ("stiffness", mats.stiffness)):
            coo = matrix.tocoo()
            order = np.lexsort((coo.col, coo.row))
            with open(_out_path(args.out, f"{name}.txt"), "w") as fh:
                for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
                    fh.write(f"{r} {c} {v:.17g}\n")
        with open(_out_path(args.out, "lumped.txt"), "w") as fh:
            for i, v in enumerate(mats.lumped):
                fh.write(f"{i} {i} {v:.17g}\n")
    return EXIT_OK


def _default_sim_schema():
    p0 = study.reference_params()
    return {
        "mode": (str, "exact"),
        "p": (int, 3),
        "q": (int, 2),
        "T": (int, 50),
        "m": (int, 0),                  # 0: all lattice sites per variable
        "lattice_n": (int, 25),
        "seed": (int, 0),
        "beta": (_floats, p0.beta),
        "sigma2": (_floats, p0.sigma2),
        "f": (_floats, p0.f),
        "w": (_floats, p0.w.flatten()),  # row-major
        "kappa": (_floats, p0.kappa),
        "mu0": (_floats, np.ones(2)),
        "sigma0": (_floats, np.ones(2)),
        "mesh": (_paths, None),          # low-rank mode only
        "missing_fraction": (float, 0.0),
        "out_panel": (str, "panel.csv"),
        "out_truth": (str, "truth.csv"),
    }


def cmd_simulate(args) -> int:
    cfg = resolve(_default_sim_schema(), parse_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    p, q = cfg["p"], cfg["q"]
    params = ModelParams(
        beta=cfg["beta"],
        sigma2=cfg["sigma2"],
        f=cfg["f"],
        w=np.asarray(cfg["w"]).reshape(p, q),
        kappa=cfg["kappa"],
        mu0=cfg["mu0"],
        sigma0=cfg["sigma0"],
    )
    lattice = study.unit_lattice(cfg["lattice_n"])
    if cfg["m"]:
        from .model import rng_stream

        rng = rng_stream(cfg["seed"], "sites", 0)
        sites = [
            lattice[np.sort(rng.choice(len(lattice), cfg["m"], replace=False))]
            for _ in range(p)
        ]
    else:
        sites = [lattice] * p
    if cfg["mode"] == "exact":
        panel, truth = simulate_exact(params, sites, cfg["T"], cfg["seed"])
    elif cfg["mode"] == "lowrank":
        if not cfg["mesh"]:
            raise ConfigError("low-rank simulation requires mesh = <paths>")
        meshes = _load_meshes(cfg["mesh"], q)
        panel, truth = simulate_lowrank(params, meshes, sites, cfg["T"], cfg["seed"])
    else:
        raise ConfigError(f"unknown mode: {cfg['mode']}")
    if cfg["missing_fraction"] > 0:
        from .model import drop_observations

        panel = drop_observations(panel, cfg["missing_fraction"], cfg["seed"])
    panel_path = _out_path(args.out, cfg["out_panel"])
    panel.to_csv(panel_path)
    truth_path = _out_path(args.out, cfg["out_truth"])
    with open(truth_path, "w") as fh:
        fh.write("component,site_x,site_y,t,value\n")
        for j in range(q):
            zj = truth.z[j]
            n_latent = zj.shape[1] if zj.ndim == 2 else len(zj[0])
            for t in range(zj.shape[0] if hasattr(zj, "shape") else len(zj)):
                for s in range(n_latent):
                    sx, sy = truth.latent_sites[s] if cfg["mode"] == "exact" else (np.nan, np.nan)
                    fh.write(f"{j + 1},{sx:.17g},{sy:.17g},{t},{zj[t][s]:.17g}\n")
    print(f"panel written to {panel_path} ({panel.n_obs()} observations)")
    print(f"latent truth written to {truth_path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    schema = {
        "panel": (_path, REQUIRED),
        "mesh": (_paths, REQUIRED),
        "q": (int, 0),
        "max_iter": (int, 300),
        "rel_tol": (float, 1e-4),
        "kappa_lo": (float, 0.1 * _SQRT8),
        "kappa_hi": (float, 20 * _SQRT8),
        "kappa_tol": (float, 1e-3),
        "seed": (int, 0),
        "out_report": (str, "fit.txt"),
    }
    cfg = resolve(schema, parse_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    panel = ObservationPanel.from_csv(cfg["panel"])
    meshes = _load_meshes(cfg["mesh"], cfg["q"] or None)
    em_cfg = em.EmConfig(
        max_iter=cfg["max_iter"],
        rel_tol=cfg["rel_tol"],
        kappa_bounds=(cfg["kappa_lo"], cfg["kappa_hi"]),
        kappa_tol=cfg["kappa_tol"],
        rng_seed=cfg["seed"],
    )
    result = em.fit(panel, meshes, em_cfg)
    out = _out_path(args.out, cfg["out_report"])
    em.write_report(result, out)
    _append_state(out, result.params)
    print(
        f"fit written to {out}: loglik={result.loglik_trace[-1]:.4f} "
        f"iterations={result.iterations} converged={str(result.converged).lower()}"
    )
    if args.debug_loglik:
        moments, _ = em.e_step(result.params, panel, BasisCache(result.meshes, panel))
        precs = em.component_precisions(result.params, BasisCache(result.meshes, panel))
        from .kalman import kalman_filter

        filt = kalman_filter(
            result.params, panel, BasisCache(result.meshes, panel),
            [p.unit_cov() for p in precs],
        )
        with open(args.debug_loglik, "w") as fh:
            fh.write("t,loglik_term\n")
            for t, term in enumerate(filt.loglik_terms, start=1):
                fh.write(f"{t},{term:.17g}\n")
    return EXIT_OK


def _append_state(report_path, params: ModelParams) -> None:
    """Initial-state vectors appended to the fit report (needed to rebuild
    smoother moments for prediction)."""
    with open(report_path, "a") as fh:
        if params.mu0 is not None:
            fh.write("mu0 = " + " ".join(f"{v:.17g}" for v in params.mu0) + "\n")
        if params.sigma0 is not None:
            flat = np.asarray(params.sigma0).ravel()
            fh.write("sigma0 = " + " ".join(f"{v:.17g}" for v in flat) + "\n")


def _rebuild_moments(params, panel, meshes):
    cache = BasisCache(meshes, panel)
    moments, _ = em.e_step(params, panel, cache)
    return cache, moments


def cmd_predict(args) -> int:
    schema = {
        "panel": (_path, REQUIRED),
        "mesh": (_paths, REQUIRED),
        "report": (_path, REQUIRED),
        "bbox": (_floats, None),         # x0 y0 x1 y1; default mesh bbox
        "nx": (int, 25),
        "ny": (int, 25),
        "times": (_times, None),
        "include_noise": (_bool, False),
        "out_raster": (str, "raster.csv"),
    }
    cfg = resolve(schema, parse_config_file(args.config))
    panel = ObservationPanel.from_csv(cfg["panel"])
    params = _params_from_report(em.read_report(cfg["report"]))
    meshes = _load_meshes(cfg["mesh"], params.q)
    cache, moments = _rebuild_moments(params, panel, meshes)
    if cfg["bbox"] is None:
        pts = meshes[0].latent_vertices
        bbox = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    else:
        bbox = tuple(cfg["bbox"])
    out = _out_path(args.out, cfg["out_raster"])
    raster_map(
        params, moments, meshes, bbox, cfg["nx"], cfg["ny"],
        times=cfg["times"], path=out, include_noise=cfg["include_noise"],
    )
    print(f"raster written to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    schema = {
        "panel_train": (_path, REQUIRED),
        "panel_test": (_path, REQUIRED),
        "mesh": (_paths, REQUIRED),
        "report": (_path, REQUIRED),
        "out_metrics": (str, "metrics.csv"),
    }
    cfg = resolve(schema, parse_config_file(args.config))
    train = ObservationPanel.from_csv(cfg["panel_train"])
    test = ObservationPanel.from_csv(cfg["panel_test"])
    params = _params_from_report(em.read_report(cfg["report"]))
    meshes = _load_meshes(cfg["mesh"], params.q)
    cache, moments = _rebuild_moments(params, train, meshes)
    report = validate(params, moments, train, test, cache)
    out = _out_path(args.out, cfg["out_metrics"])
    with open(out, "w") as fh:
        fh.write("variable,rmse_train,rmse_test,r2_train,r2_test\n")
        for i in range(train.p):
            fh.write(
                f"{i + 1},{report.rmse_train[i]:.6f},{report.rmse_test[i]:.6f},"
                f"{report.r2_train[i]:.6f},{report.r2_test[i]:.6f}\n"
            )
        fh.write(
            f"pooled,{report.rmse_train_pooled:.6f},{report.rmse_test_pooled:.6f},,\n"
        )
    print(f"validation metrics written to {out}")
    print(
        f"pooled rmse_train={report.rmse_train_pooled:.4f} "
        f"rmse_test={report.rmse_test_pooled:.4f}"
    )
    return EXIT_OK


def cmd_study(args) -> int:
    schema = {
        "m": (int, 100),
        "T": (int, 50),
        "lr": (float, 1.0),
        "replicates": (int, 20),
        "seed": (int, 0),
        "lattice_n": (int, 25),
        "theta_min": (float, 0.15),
        "max_sweeps": (int, 10),
        "buffer_kappa": (float, 2 * _SQRT8),
        "max_iter": (int, 300),
        "rel_tol": (float, 1e-4),
        "out_table": (str, "study.csv"),
    }
    cfg = resolve(schema, parse_config_file(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    scenario = study.ScenarioConfig(
        m=cfg["m"],
        T=cfg["T"],
        lr=cfg["lr"],
        replicates=cfg["replicates"],
        seed=cfg["seed"],
        lattice_n=cfg["lattice_n"],
        theta_min=cfg["theta_min"],
        max_sweeps=cfg["max_sweeps"],
        buffer_kappa=cfg["buffer_kappa"],
        em=em.EmConfig(max_iter=cfg["max_iter"], rel_tol=cfg["rel_tol"]),
    )
    rows, n_failed, failures = study.run_study(scenario, threads=args.threads)
    out = _out_path(args.out, cfg["out_table"])
    study.write_study_csv(rows, out)
    print(f"study table written to {out} (failed replicates: {n_failed})")
    for msg in failures:
        print(f"  {msg}", file=sys.stderr)
    return EXIT_PARTIAL if n_failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrssm",
        description="Low-rank SPDE state-space modelling of spatio-temporal data",
    )
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build, decimate, smooth, and buffer a mesh")
    p.add_argument("--dump-matrices", action="store_true")
    p.set_defaults(func=cmd_mesh)
    p = sub.add_parser("simulate", help="simulate a synthetic panel")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", help="EM parameter estimation")
    p.add_argument("--debug-loglik", default=None, help="per-t loglik CSV path")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("predict", help="raster prediction map")
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("validate", help="train/test RMSE and R2")
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("study", help="Monte Carlo bias/RMSE study")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    # subcommand-first invocations are accepted too (global flags may follow)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LrssmError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
