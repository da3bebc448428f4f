import json
import os

import numpy as np
import pytest

from aimkit.cli import main


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, line.strip().split(","))) for line in fh]
    return header, rows


class TestSeCurve:
    def test_writes_schema_and_meta(self, tmp_path):
        rc = main([
            "se-curve", "--channel", "softmax", "--T", "2", "--rho", "0.5",
            "--alpha", "0.05,0.1", "--beta", "1.0", "--out", str(tmp_path),
        ])
        assert rc == 0
        header, rows = read_csv(tmp_path / "se_curve.csv")
        assert header == ["channel", "T", "rho", "alpha", "q", "qhat", "mmse",
                          "gen_error", "converged", "se_q"]
        assert len(rows) == 2
        assert float(rows[0]["mmse"]) > float(rows[1]["mmse"])
        meta = json.loads((tmp_path / "se_curve.csv.meta.json").read_text())
        assert "content_hash" in meta and meta["config"]["channel"] == "softmax"

    def test_empty_grid_warns_noop(self, tmp_path, capsys):
        rc = main(["se-curve", "--alpha", "", "--out", str(tmp_path)])
        assert rc == 0
        assert not (tmp_path / "se_curve.csv").exists()
        assert "empty alpha grid" in capsys.readouterr().err

    def test_resume_skips_completed_rows(self, tmp_path):
        args = ["se-curve", "--channel", "linear", "--T", "1", "--rho", "0.5",
                "--alpha", "0.1,0.2", "--out", str(tmp_path)]
        assert main(args) == 0
        first = (tmp_path / "se_curve.csv").read_text()
        # adding one alpha reuses the two finished cells
        args[args.index("0.1,0.2")] = "0.1,0.2,0.3"
        assert main(args) == 0
        second = (tmp_path / "se_curve.csv").read_text()
        assert first.splitlines()[1] == second.splitlines()[1]
        assert len(second.splitlines()) == 4

    def test_regeneration_is_byte_identical(self, tmp_path):
        args = ["se-curve", "--channel", "softmax", "--T", "2", "--rho", "0.5",
                "--alpha", "0.08:0.12:2", "--out", str(tmp_path)]
        assert main(args) == 0
        blob1 = (tmp_path / "se_curve.csv").read_bytes()
        os.remove(tmp_path / "se_curve.csv")
        assert main(args) == 0
        assert (tmp_path / "se_curve.csv").read_bytes() == blob1

    def test_range_grid_parsing(self, tmp_path):
        rc = main(["se-curve", "--channel", "linear", "--T", "1", "--rho", "0.5",
                   "--alpha", "0.1:1:3:log", "--out", str(tmp_path)])
        assert rc == 0
        _, rows = read_csv(tmp_path / "se_curve.csv")
        alphas = [float(r["alpha"]) for r in rows]
        assert alphas == pytest.approx(list(np.geomspace(0.1, 1, 3)))


class TestThresholds:
    def test_softmax_closed_and_bisect(self, tmp_path):
        rc = main(["thresholds", "--channel", "softmax", "--T", "2", "--rho",
                   "0.5", "--method", "both", "--out", str(tmp_path)])
        assert rc == 0
        records = json.loads((tmp_path / "thresholds.json").read_text())
        closed = [r for r in records if r["method"] == "closed-form"][0]
        bisect = [r for r in records if r["method"] == "bisection"][0]
        assert closed["alpha_star"] == pytest.approx(0.1875, rel=1e-12)
        assert bisect["alpha_star"] == pytest.approx(0.1875, abs=1e-3)


class TestMappingCheck:
    def test_default_suite_passes(self, capsys):
        rc = main(["mapping-check", "--cases", "12", "--seed", "3"])
        assert rc == 0
        assert "12/12 cases within 1e-10" in capsys.readouterr().out


class TestDensity:
    def test_density_csv(self, tmp_path):
        rc = main(["density", "--rho", "0.5", "--qhat", "2.0", "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "density.csv").read_text().splitlines()
        assert lines[0].startswith("x,mu,rho=0.5,qhat=2.0")
        xs, mus = zip(*((float(a), float(b)) for a, b in
                        (line.split(",")[:2] for line in lines[1:])))
        mass = np.trapezoid(mus, xs)
        assert mass == pytest.approx(1.0, abs=1e-3)

    def test_bad_parameter_exit_code(self, tmp_path):
        rc = main(["density", "--rho", "-1", "--out", str(tmp_path)])
        assert rc == 2


class TestConfigFile:
    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("rho=0.5\nqhat=1.0\nname=from_file.csv\n")
        rc = main(["--config", str(cfg), "density", "--qhat", "2.0",
                   "--out", str(tmp_path)])
        assert rc == 0
        lines = (tmp_path / "from_file.csv").read_text().splitlines()
        assert "qhat=2.0" in lines[0]


class TestAmpGd:
    def test_amp_command_emits_trajectories_and_summary(self, tmp_path):
        rc = main(["amp", "--channel", "softmax", "--T", "2", "--rho", "0.5",
                   "--alpha", "0.3", "--d", "64", "--seeds", "2", "--beta", "1.0",
                   "--max-iter", "60", "--out", str(tmp_path)])
        assert rc in (0, 1)
        summary = json.loads((tmp_path / "amp_summary.json").read_text())
        assert summary["cells"][0]["n_seeds"] == 2
        trajs = [p for p in os.listdir(tmp_path) if p.startswith("amp_traj")]
        assert len(trajs) == 2

    def test_gd_command_summary(self, tmp_path):
        rc = main(["gd", "--T", "2", "--rho", "0.5", "--alpha", "0.3", "--d", "48",
                   "--seeds", "1", "--m-runs", "2", "--epochs", "120",
                   "--out", str(tmp_path)])
        assert rc == 0
        summary = json.loads((tmp_path / "gd_summary.json").read_text())
        for key in ("gd_error_mean", "gd_error_se", "agd_error", "se_mmse_reference"):
            assert key in summary
        assert (tmp_path / "gd_runs.csv").exists()
