from __future__ import annotations

import filecmp
import textwrap

import numpy as np
import pytest

from roughns.cli import main
from roughns.config import config_from_string, load_config, parse_noise
from roughns.errors import ConfigError
from roughns.experiments import run_chen_audit, run_remainder_scan

SMALL_ENERGY = """
[model]
cutoff = 4
nu = 0.01
initial = taylor-green
noise = const(1, 0)
[driver]
source_level = 8
mesh_level = 6
seed = 3
"""

SMALL_SCAN = """
[model]
cutoff = 2
initial = random
noise = const(1, 0)
substeps = 4
[driver]
source_level = 7
mesh_level = 5
[analysis]
levels = 2..5
replicas = 3
"""


def write(tmp_path, text, name="cfg.ini"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text))
    return str(path)


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = config_from_string(SMALL_ENERGY)
        assert cfg.cutoff == 4 and cfg.seed == 3 and cfg.p == 2.5 and cfg.K == 1

    def test_noise_grammar(self):
        sig = parse_noise("const(1, 0); modes(1 1 sin 0.3, 0 1 cos 0.2)", 2)
        assert sig.K == 2 and not sig.is_constant
        assert sig.channels[1].divergence_residual() < 1e-15

    @pytest.mark.parametrize("text,field", [
        ("[model]\nnu = -1\n", "model.nu"),
        ("[model]\nviscosity = 1\n", "model.viscosity"),
        ("[extras]\na = 1\n", "extras"),
        ("[driver]\np = 3.0\n", "driver.p"),
        ("[driver]\nkind = fbm(0.7)\n", "driver.kind"),
        ("[driver]\nseed = -1\n", "driver.seed"),
        ("[model]\nnoise = const(1)\n", "model.noise"),
        ("[model]\nnoise = modes(0 0 sin 1)\n", "model.noise"),
        ("[model]\ncutoff = x\n", "model.cutoff"),
        ("[analysis]\nlevels = 5..3\n", "analysis.levels"),
        ("[model]\nsubsteps = 3\n", "model.substeps"),
        ("[model]\nnu = nan\n", "model.nu"),
    ])
    def test_rejections_name_the_field(self, text, field):
        with pytest.raises(ConfigError) as info:
            config_from_string(text)
        assert info.value.field == field

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_three_d_rejected_by_solver_runs(self, tmp_path):
        cfg = config_from_string("[model]\nd = 3\ninitial = random\nnoise = const(1, 0, 0)\n")
        with pytest.raises(ConfigError, match="model.d"):
            run_remainder_scan(cfg, tmp_path)
        small = config_from_string("[model]\nd = 3\ncutoff = 2\ninitial = random\nnoise = const(1, 0, 0)\n"
                                   "[driver]\nsource_level = 6\nmesh_level = 4\n")
        assert run_chen_audit(small, tmp_path).passed


class TestCLI:
    def test_energy_check_passes(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["energy-check", "--config", write(tmp_path, SMALL_ENERGY), "--out", str(out)]) == 0
        assert "energy-check: PASS" in capsys.readouterr().out
        head = (out / "trajectory.csv").read_text().splitlines()[0]
        assert head.startswith("t,c_1,") and head.endswith("energy,dissipation_integral")
        assert (out / "basis.csv").read_text().startswith("index,n1,n2,parity,lambda\n")

    def test_zero_initial_ledger(self, tmp_path):
        cfg = write(tmp_path, SMALL_ENERGY.replace("taylor-green", "zero"))
        assert main(["energy-check", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        data = np.loadtxt(tmp_path / "o" / "trajectory.csv", delimiter=",", skiprows=1)
        assert not data[:, 1:].any()

    def test_determinism(self, tmp_path):
        cfg = write(tmp_path, SMALL_ENERGY)
        for name in ("a", "b"):
            assert main(["energy-check", "--config", cfg, "--out", str(tmp_path / name), "--seed", "11"]) == 0
        for f in ("trajectory.csv", "driver.csv", "summary.csv", "basis.csv"):
            assert filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)
        assert main(["energy-check", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "12"]) == 0
        assert not filecmp.cmp(tmp_path / "a" / "driver.csv", tmp_path / "c" / "driver.csv", shallow=False)

    def test_threads_do_not_change_output(self, tmp_path, monkeypatch):
        cfg = write(tmp_path, SMALL_SCAN)
        codes = []
        for threads, name in (("1", "serial"), ("3", "pool")):
            monkeypatch.setenv("ROUGHNS_THREADS", threads)
            codes.append(main(["remainder-scan", "--config", cfg, "--out", str(tmp_path / name)]))
        assert codes[0] == codes[1]
        for r in range(3):
            assert filecmp.cmp(tmp_path / "serial" / f"remainder_scan_r{r}.csv",
                               tmp_path / "pool" / f"remainder_scan_r{r}.csv", shallow=False)
        assert (tmp_path / "serial" / "slopes.csv").read_text().splitlines()[0] == "quantity,slope,intercept,r2"

    def test_chen_audit_and_corruption(self, tmp_path, capsys):
        cfg = write(tmp_path, "[model]\ncutoff = 4\nnoise = const(1, 0); const(0, 1)\n"
                              "[driver]\nsource_level = 8\nmesh_level = 5\n")
        assert main(["chen-audit", "--config", cfg, "--out", str(tmp_path / "ok")]) == 0
        assert main(["chen-audit", "--config", cfg, "--out", str(tmp_path / "bad"), "--corrupt-zz", "1e-6"]) == 1
        text = (tmp_path / "bad" / "chen_audit.csv").read_text()
        lift_defect = float(text.splitlines()[1].split(",")[1])
        assert lift_defect == pytest.approx(1e-6, rel=1e-6)
        assert (tmp_path / "ok" / "lift.csv").read_text().startswith("s,t,Z_1,Z_2,ZZ_11,ZZ_12,ZZ_21,ZZ_22\n")

    def test_single_channel_symmetric_lift(self, tmp_path):
        cfg = write(tmp_path, "[model]\ncutoff = 4\n[driver]\nsource_level = 8\nmesh_level = 4\n")
        assert main(["chen-audit", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        data = np.loadtxt(tmp_path / "o" / "lift.csv", delimiter=",", skiprows=1)
        assert np.allclose(data[:, 3], 0.5 * data[:, 2] ** 2, atol=1e-15)

    @pytest.mark.parametrize("argv_extra,text", [
        ([], "[model]\nnu = 0\n"),
        (["--corrupt-zz", "1e-3"], SMALL_ENERGY),
        (["--seed", "-4"], SMALL_ENERGY),
    ])
    def test_config_errors_exit_2(self, tmp_path, argv_extra, text, capsys):
        assert main(["energy-check", "--config", write(tmp_path, text), "--out", str(tmp_path / "o"),
                     *argv_extra]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_and_unwritable_out(self, tmp_path):
        assert main(["energy-check", "--config", str(tmp_path / "missing.ini")]) == 2
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["energy-check", "--config", write(tmp_path, SMALL_ENERGY), "--out", str(blocker / "sub")]) == 2

    def test_numerical_failure_exit_1(self, tmp_path):
        cfg = write(tmp_path, SMALL_ENERGY.replace("seed = 3", "seed = 3\n[tolerances]\noracle = 1e-30"))
        assert main(["energy-check", "--config", cfg, "--out", str(tmp_path / "o")]) == 1

    def test_unknown_experiment(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["nonsense", "--config", write(tmp_path, SMALL_ENERGY)])
        assert info.value.code == 2
