import csv
import json
import os
from pathlib import Path

import pytest

from stochastic_centroidal import cli
from stochastic_centroidal.cli import main, trajectory_columns, write_atomic

SCENARIOS = Path(cli.__file__).parent / "scenarios"
DATA = Path(__file__).parent / "data"


def stand_config(tmp_path, **overrides):
    raw = json.loads((SCENARIOS / "stand.json").read_text())
    for dotted, value in overrides.items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def assert_csv_close(got_path, want_path, atol=1e-9):
    gh, grows = read_csv(got_path)
    wh, wrows = read_csv(want_path)
    assert gh == wh
    assert len(grows) == len(wrows)
    for g, w in zip(grows, wrows):
        for a, b in zip(g, w):
            if b == "":
                assert a == ""
            else:
                assert float(a) == pytest.approx(float(b), abs=atol)


@pytest.fixture(scope="module")
def stand_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("stand")
    code = main(["--config", str(SCENARIOS / "stand.json"), "--out", str(out)])
    return code, out


def test_stand_all_outputs(stand_run):
    code, out = stand_run
    assert code == 0
    names = {p.name for p in out.iterdir()}
    assert {"trajectory_nominal.csv", "trajectory_stochastic.csv", "diagnostics_nominal.csv",
            "diagnostics_stochastic.csv", "montecarlo.csv", "summary.json"} <= names
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert summary["errors"] == []
    assert summary["solves"]["nominal"]["converged"]
    assert summary["solves"]["stochastic"]["converged"]
    assert 0.0 <= summary["monte_carlo"]["stochastic_satisfaction"] <= 1.0


@pytest.mark.parametrize("mode", ["nominal", "stochastic"])
def test_golden_trajectory(stand_run, mode):
    _, out = stand_run
    assert_csv_close(out / f"trajectory_{mode}.csv", DATA / f"stand_trajectory_{mode}.csv")


def test_golden_diagnostics_columns(stand_run):
    _, out = stand_run
    gh, grows = read_csv(out / "diagnostics_stochastic.csv")
    wh, wrows = read_csv(DATA / "stand_diagnostics_stochastic.csv")
    assert gh == wh == list(cli.DIAGNOSTIC_COLUMNS)
    assert len(grows) == len(wrows)


def test_trajectory_columns_stable():
    cols = trajectory_columns(("FL", "FR", "HL", "HR"))
    assert cols[:11] == ["k", "time", "c_x", "c_y", "c_z", "l_x", "l_y", "l_z",
                         "kappa_x", "kappa_y", "kappa_z"]
    assert cols[11:14] == ["f_FL_x", "f_FL_y", "f_FL_z"]
    assert cols[23:27] == ["ratio_FL", "ratio_FR", "ratio_HL", "ratio_HR"]
    assert cols[27] == "eta_FL_px"
    assert cols[-1] == "eta_HR_cz-"
    assert len(cols) == 11 + 12 + 4 + 16 + 24


def test_repeat_runs_byte_identical(tmp_path):
    cfg = SCENARIOS / "stand.json"
    for name in ("a", "b"):
        assert main(["--config", str(cfg), "--out", str(tmp_path / name), "--seed", "5"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_changes_monte_carlo_only(tmp_path):
    cfg = stand_config(tmp_path, **{"uncertainty.scale": 1.0})
    main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "2"])
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "trajectory_stochastic.csv").read_bytes() == (b / "trajectory_stochastic.csv").read_bytes()
    assert (a / "montecarlo.csv").read_bytes() != (b / "montecarlo.csv").read_bytes()


def test_alpha_out_of_range(tmp_path):
    cfg = stand_config(tmp_path, **{"uncertainty.alpha_u": 1.2})
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "error"
    assert summary["errors"][0]["code"] == "config.alpha_u.range"
    assert summary["files"] == []


def test_unknown_key_rejected(tmp_path):
    cfg = stand_config(tmp_path, **{"gait.speed": 3})
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 1
    code = json.loads((out / "summary.json").read_text())["errors"][0]["code"]
    assert code == "config.speed.unknown"


def test_missing_and_malformed_files(tmp_path):
    out = tmp_path / "out"
    assert main(["--config", str(tmp_path / "nope.json"), "--out", str(out)]) == 1
    assert json.loads((out / "summary.json").read_text())["errors"][0]["code"] == "config.file.unreadable"
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    assert main(["--config", str(bad), "--out", str(out)]) == 1
    assert json.loads((out / "summary.json").read_text())["errors"][0]["code"] == "config.file.json"


def test_seed_out_of_range(tmp_path):
    out = tmp_path / "out"
    assert main(["--config", str(SCENARIOS / "stand.json"), "--out", str(out),
                 "--seed", str(2**64)]) == 1
    assert json.loads((out / "summary.json").read_text())["errors"][0]["code"] == "config.seed.range"


def test_non_convergence_exit_code(tmp_path):
    cfg = stand_config(tmp_path, **{"gait.type": "trot", "gait.step_length": 0.1,
                                    "gait.phase_steps": 5, "gait.n_cycles": 1, "gait.stance_steps": 10,
                                    "scp.max_iters": 1})
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--mode", "nominal"]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "not_converged"
    assert summary["errors"][0]["code"] == "solve.nominal.not_converged"
    assert (out / "trajectory_nominal.csv").exists()


def test_backoff_failure_exit_code(tmp_path):
    cfg = stand_config(tmp_path, **{"gait.friction": 0.0})
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--mode", "stochastic"]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["errors"][0]["code"] == "solve.stochastic.backoff_infeasible"
    assert not (out / "trajectory_stochastic.csv").exists()


@pytest.mark.parametrize("mode, files", [
    ("nominal", {"trajectory_nominal.csv", "diagnostics_nominal.csv"}),
    ("solve-stochastic", {"trajectory_stochastic.csv", "diagnostics_stochastic.csv"}),
])
def test_single_mode_outputs(tmp_path, mode, files):
    out = tmp_path / "out"
    assert main(["--config", str(SCENARIOS / "stand.json"), "--out", str(out), "--mode", mode]) == 0
    assert {p.name for p in out.iterdir()} == files | {"summary.json"}


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "x.csv"
    write_atomic(target, "old\n")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        write_atomic(target, "new\n")
    assert target.read_text() == "old\n"
    assert [p.name for p in tmp_path.iterdir()] == ["x.csv"]


@pytest.mark.parametrize("name", ["trot.json", "bound.json", "trot_desk.json", "bound_desk.json"])
def test_shipped_scenarios_validate(name):
    from stochastic_centroidal.config import load_config
    cfg = load_config(SCENARIOS / name)
    plan = cfg.contact_plan()
    assert plan.horizon > 0
    if name in ("trot.json", "bound.json"):
        assert plan.dt == 0.01
        assert plan.horizon == 165


def test_infeasible_stochastic_qp_exit_code(tmp_path):
    cfg = stand_config(tmp_path, **{"uncertainty.scale": 100.0, "scp.lqr_r": 0.01})
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["errors"][0]["code"] == "solve.stochastic.infeasible"
    assert summary["status"] == "error"
    assert "trajectory_nominal.csv" in summary["files"]
