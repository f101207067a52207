import subprocess
import sys

import numpy as np
import pytest

from rigidflow import cli
from rigidflow.io import read_field_dump, read_timeseries

SMALL = """\
outer_radius = 1.0
body_radius = 0.2
nr = 4
ntheta = 16
dt = 0.01
t_final = 0.05
"""


def _cfg(tmp_path, extra="", name="cfg.txt"):
    p = tmp_path / name
    p.write_text(SMALL + extra)
    return p


def test_unknown_subcommand_usage(capsys):
    assert cli.main(["levitate", "x"]) == cli.EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand_and_config(capsys, tmp_path):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["simulate", "--out", str(tmp_path)]) == cli.EXIT_USAGE
    assert cli.main(["simulate", "a", "--bogus"]) == cli.EXIT_USAGE


def test_invalid_inputs_exit_1(tmp_path, capsys):
    assert cli.main(["simulate", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == cli.EXIT_INVALID
    bad = _cfg(tmp_path, "body_radius = 2.0\n")
    assert cli.main(["simulate", str(bad), "--out", str(tmp_path)]) == cli.EXIT_INVALID
    assert "body_radius" in capsys.readouterr().err


def test_simulate_rest_writes_zeros(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    header, rows = read_timeseries(out / "run.csv")
    assert tuple(header) == cli.SIMULATE_COLUMNS
    assert rows.shape == (6, 9)
    np.testing.assert_allclose(rows[:, 0], np.linspace(0, 0.05, 6), atol=1e-15)
    assert not np.any(rows[:, 1:])
    assert "COMPLETED" in capsys.readouterr().out


def test_simulate_dumps_and_quiet(tmp_path, capsys):
    cfg = _cfg(tmp_path, "l0 = 0.1, 0.0\nr0 = 0.3\nfluid_ic = rigid-extension\ncsv = traj.csv\n")
    out = tmp_path / "o"
    assert cli.main(["simulate", str(cfg), "--out", str(out), "--dump-stride", "2", "--quiet"]) == cli.EXIT_OK
    assert capsys.readouterr().out == ""
    dumps = sorted(out.glob("field_*.fsifld"))
    assert [d.name for d in dumps] == ["field_000000.fsifld", "field_000002.fsifld", "field_000004.fsifld"]
    _, rows = read_timeseries(out / "traj.csv")
    last = read_field_dump(dumps[-1])
    assert last.t == rows[4, 0]
    assert last.state.h[0] == rows[4, 1] and last.state.r == rows[4, 6]
    assert last.dims == (4, 16)


def test_simulate_deterministic(tmp_path):
    cfg = _cfg(tmp_path, "l0 = 0.1, -0.05\nr0 = 0.3\nfluid_ic = rigid-extension\n")
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["simulate", str(cfg), "--out", str(d), "--quiet"]) == cli.EXIT_OK
    assert (a / "run.csv").read_bytes() == (b / "run.csv").read_bytes()


def test_simulate_collision_exit_3(tmp_path, monkeypatch):
    from rigidflow import solver as solver_mod

    def close_call(cfg, on_step=None):
        disc, params, cutoff, settings = solver_mod.setup_from_config(cfg)
        s = solver_mod.FSISolver(disc, params, cutoff, settings, collision_threshold=0.795)
        return s.run(*solver_mod.initial_fields(disc, cfg))

    monkeypatch.setattr(solver_mod, "run", close_call)
    cfg = _cfg(tmp_path, "l0 = 1.0, 0.0\nfluid_ic = rigid-extension\n")
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path), "--quiet"]) == cli.EXIT_COLLISION
    _, rows = read_timeseries(tmp_path / "run.csv")
    assert 1 < len(rows) < 6


def test_numerical_failure_exit_2(tmp_path, capsys):
    cfg = _cfg(tmp_path, "l0 = 0.5, 0.0\nfluid_ic = rigid-extension\npicard_max = 1\n")
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path), "--quiet"]) == cli.EXIT_NUMERICAL
    assert "Picard" in capsys.readouterr().err


def test_non_finite_output_exit_2(tmp_path, monkeypatch):
    from rigidflow import diagnostics

    monkeypatch.setattr(diagnostics, "kinetic_energies", lambda traj, n: (float("nan"), 0.0))
    cfg = _cfg(tmp_path)
    assert cli.main(["simulate", str(cfg), "--out", str(tmp_path), "--quiet"]) == cli.EXIT_NUMERICAL
    assert not (tmp_path / "run.csv").exists()


def test_verify_geomap(tmp_path, capsys):
    cfg = _cfg(tmp_path, "l0 = 0.1, 0.05\nr0 = 0.5\n")
    assert cli.main(["verify-geomap", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out
    _, rows = read_timeseries(tmp_path / "geomap.csv")
    assert np.all(rows[:, 1] <= rows[:, 2])


@pytest.mark.parametrize("cmd,csv,ncols", [
    ("kirchhoff", "kirchhoff.csv", 5),
    ("added-mass", "added_mass.csv", 7),
    ("energy-audit", "energy.csv", 7),
    ("compare", "compare.csv", 4),
])
def test_other_subcommands(tmp_path, cmd, csv, ncols, monkeypatch):
    monkeypatch.setenv("RIGIDFLOW_THREADS", "1")
    cfg = _cfg(tmp_path, "l0 = 0.1, 0.0\nfluid_ic = rigid-extension\n")
    assert cli.main([cmd, str(cfg), "--out", str(tmp_path), "--quiet"]) == cli.EXIT_OK
    header, rows = read_timeseries(tmp_path / csv)
    assert len(header) == ncols and len(rows) > 0
    assert np.all(np.isfinite(rows))


def test_manufactured_subcommand(tmp_path, capsys):
    cfg = _cfg(tmp_path)
    assert cli.main(["manufactured", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_OK
    _, rows = read_timeseries(tmp_path / "manufactured.csv")
    np.testing.assert_array_equal(rows[:, 0], [4, 8, 16])
    assert np.all(np.diff(rows[:, 3]) < 0)
    assert "orders" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rigidflow.cli", "nonsense"], capture_output=True, text=True)
    assert res.returncode == cli.EXIT_USAGE
    assert "usage:" in res.stderr
