import csv
import os

import numpy as np
import pytest

from lrssm import cli
from lrssm import model as mdl
from lrssm import study


def write_config(path, **kwargs):
    with open(path, "w") as fh:
        for key, value in kwargs.items():
            fh.write(f"{key} = {value}\n")
    return str(path)


def small_panel_csv(tmp_path, seed=0, p=2, T=3, m=10):
    rng = np.random.default_rng(seed)
    panel = mdl.ObservationPanel(p=p, T=T, n_covariates=[1] * p)
    sites = rng.uniform(0.05, 0.95, size=(m, 2))
    for i in range(p):
        for t in range(1, T + 1):
            panel.blocks[(i, t)] = mdl.PanelBlock(
                sites, rng.standard_normal(m), rng.standard_normal((m, 1))
            )
    path = tmp_path / "panel.csv"
    panel.to_csv(path)
    return str(path)


class TestConfigParsing:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        panel = small_panel_csv(tmp_path)
        cfg = write_config(tmp_path / "c.txt", panel=panel, bogus_key=1)
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_CONFIG
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_required_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.txt")
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_CONFIG

    def test_nonexistent_path_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "c.txt", panel="/does/not/exist.csv")
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_CONFIG

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("this is not a key value pair\n")
        rc = cli.main(["--config", str(path), "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_CONFIG


class TestMeshCommand:
    def test_end_to_end(self, tmp_path, capsys):
        panel = small_panel_csv(tmp_path)
        cfg = write_config(
            tmp_path / "c.txt", panel=panel, theta_min=0.15, kappa_init=8.0
        )
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "R=10" in out and "min_angle=" in out and "h=" in out
        mesh_path = tmp_path / "mesh.txt"
        assert mesh_path.exists()
        assert mesh_path.read_text().startswith("lrssm-mesh v1")

    def test_deterministic(self, tmp_path):
        panel = small_panel_csv(tmp_path)
        cfg = write_config(tmp_path / "c.txt", panel=panel, out_mesh="m1.txt")
        cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        cfg2 = write_config(tmp_path / "c2.txt", panel=panel, out_mesh="m2.txt")
        cli.main(["--config", cfg2, "--out", str(tmp_path), "mesh"])
        assert (tmp_path / "m1.txt").read_text() == (tmp_path / "m2.txt").read_text()

    def test_decimation_target(self, tmp_path, capsys):
        panel = small_panel_csv(tmp_path, m=20)
        cfg = write_config(tmp_path / "c.txt", panel=panel, lr=0.5)
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "mesh"])
        assert rc == cli.EXIT_OK
        assert "R=10" in capsys.readouterr().out

    def test_matrix_dump(self, tmp_path):
        panel = small_panel_csv(tmp_path)
        cfg = write_config(tmp_path / "c.txt", panel=panel)
        rc = cli.main(
            ["--config", cfg, "--out", str(tmp_path), "mesh", "--dump-matrices"]
        )
        assert rc == cli.EXIT_OK
        for name in ("mass.txt", "stiffness.txt", "lumped.txt"):
            lines = (tmp_path / name).read_text().splitlines()
            parts = lines[0].split()
            assert len(parts) == 3
            int(parts[0]), int(parts[1]), float(parts[2])


class TestSimulateCommand:
    def test_exact_panel_written(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "c.txt", mode="exact", lattice_n=6, T=3, seed=1
        )
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "simulate"])
        assert rc == cli.EXIT_OK
        panel = mdl.ObservationPanel.from_csv(tmp_path / "panel.csv")
        assert panel.p == 3 and panel.T == 3
        assert panel.m(0, 1) == 36
        assert (tmp_path / "truth.csv").exists()

    def test_seed_reproducibility(self, tmp_path):
        cfg = write_config(tmp_path / "c.txt", lattice_n=5, T=2, out_panel="a.csv")
        cli.main(["--config", cfg, "--seed", "7", "--out", str(tmp_path), "simulate"])
        cfg2 = write_config(tmp_path / "c2.txt", lattice_n=5, T=2, out_panel="b.csv")
        cli.main(["--config", cfg2, "--seed", "7", "--out", str(tmp_path), "simulate"])
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_missing_fraction(self, tmp_path):
        cfg = write_config(
            tmp_path / "c.txt", lattice_n=5, T=4, missing_fraction=0.3, seed=3
        )
        cli.main(["--config", cfg, "--out", str(tmp_path), "simulate"])
        panel = mdl.ObservationPanel.from_csv(tmp_path / "panel.csv")
        assert panel.n_obs() < 3 * 25 * 4


class TestFitPredictValidate:
    @pytest.fixture()
    def fitted(self, tmp_path):
        # simulate a small low-rank-friendly panel, mesh it, fit it
        sim_cfg = write_config(
            tmp_path / "sim.txt",
            mode="exact", lattice_n=7, T=6, seed=2,
            p="2", q="1",
            beta="0.5 1.0", sigma2="0.4 0.6", f="0.7", w="1.0 0.8",
            kappa="4.0", mu0="0", sigma0="1",
        )
        assert cli.main(["--config", sim_cfg, "--out", str(tmp_path), "simulate"]) == 0
        mesh_cfg = write_config(
            tmp_path / "mesh.txt.cfg",
            panel=str(tmp_path / "panel.csv"),
            kappa_init=4.0,
        )
        assert cli.main(["--config", mesh_cfg, "--out", str(tmp_path), "mesh"]) == 0
        fit_cfg = write_config(
            tmp_path / "fit.cfg",
            panel=str(tmp_path / "panel.csv"),
            mesh=str(tmp_path / "mesh.txt"),
            q=1, max_iter=6, seed=1,
        )
        assert cli.main(["--config", fit_cfg, "--out", str(tmp_path), "fit"]) == 0
        return tmp_path

    def test_fit_report(self, fitted):
        report = (fitted / "fit.txt").read_text()
        assert report.startswith("lrssm-fit v1")
        assert "loglik_trace" in report and "mu0" in report and "sigma0" in report

    def test_predict_raster(self, fitted):
        cfg = write_config(
            fitted / "pred.cfg",
            panel=str(fitted / "panel.csv"),
            mesh=str(fitted / "mesh.txt"),
            report=str(fitted / "fit.txt"),
            bbox="-0.5 -0.5 1.0 1.0",
            nx=4, ny=4, times="1 2",
        )
        rc = cli.main(["--config", cfg, "--out", str(fitted), "predict"])
        assert rc == cli.EXIT_OK
        with open(fitted / "raster.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "y", "mean_1", "mean_2", "sd_1", "sd_2"]
        assert len(rows) == 17
        # corner outside the buffered hull is NA
        assert rows[1][2] == "NA"

    def test_validate_metrics(self, fitted):
        cfg = write_config(
            fitted / "val.cfg",
            panel_train=str(fitted / "panel.csv"),
            panel_test=str(fitted / "panel.csv"),
            mesh=str(fitted / "mesh.txt"),
            report=str(fitted / "fit.txt"),
        )
        rc = cli.main(["--config", cfg, "--out", str(fitted), "validate"])
        assert rc == cli.EXIT_OK
        lines = (fitted / "metrics.csv").read_text().splitlines()
        assert lines[0] == "variable,rmse_train,rmse_test,r2_train,r2_test"
        assert lines[-1].startswith("pooled,")


class TestStudyCommand:
    def test_single_replicate_schema(self, tmp_path):
        cfg = write_config(
            tmp_path / "study.cfg",
            m=12, T=4, lr=1.0, replicates=1, lattice_n=6,
            max_iter=4, seed=5,
        )
        rc = cli.main(["--config", cfg, "--out", str(tmp_path), "study"])
        assert rc == cli.EXIT_OK
        with open(tmp_path / "study.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0].keys()) == {
            "scenario", "param", "bias", "rmse", "rmse_train",
            "rmse_test", "runtime_s", "n_ok",
        }
        names = {r["param"] for r in rows}
        assert {"beta_1", "sigma2_3", "k_2", "w_6", "f_1"} <= names
        assert all(r["n_ok"] == "1" for r in rows)
        assert all(r["scenario"] == "m12_T4_LR100" for r in rows)

    def test_aggregation_identity_single_fit(self, tmp_path):
        scenario = study.ScenarioConfig(
            m=12, T=4, lr=1.0, replicates=1, seed=5, lattice_n=6,
        )
        scenario.em.max_iter = 4
        result = study.run_replicate(scenario, 0)
        rows, n_failed, _ = study.run_study(scenario, threads=1)
        assert n_failed == 0
        truth = study.reference_params()
        by_name = {r["param"]: r for r in rows}
        assert by_name["beta_1"]["bias"] == pytest.approx(
            result.params.beta[0] - truth.beta[0]
        )
        assert by_name["rmse_test" and "f_1"]["rmse_test"] == pytest.approx(
            result.rmse_test
        )
