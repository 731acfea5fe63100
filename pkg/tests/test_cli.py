import json

import numpy as np
import pytest

from sigcorr.cli import main
from sigcorr.model import dump_model, model_to_dict
from sigcorr.reference import QubitExampleParams, initial_state, kxminus_closed, qubit_model


def matrix_json(M):
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(M, complex)]


@pytest.fixture
def workdir(tmp_path):
    dump_model(qubit_model(QubitExampleParams()), tmp_path / "qubit.json")
    return tmp_path


def run(workdir, name, cfg, *flags):
    path = workdir / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return main([name.split("_")[0], str(path), *flags])


def table(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return np.genfromtxt(lines, delimiter=",", names=True)


def body(path):
    """CSV lines without the timestamp header."""
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("# generated=")]


def test_exact_grid_matches_closed_form(workdir):
    ts = [0.5, 1.0, 2.5]
    cfg = {"model": "qubit.json", "kind": "pointwise",
           "initial_state": {"matrix": matrix_json(initial_state(0.3))},
           "grid": {"detectors": ["x", "-"], "t1": ts, "t2": ts[::-1]}, "out": "grid.csv"}
    assert run(workdir, "exact", cfg, "--out", str(workdir / "grid.csv")) == 0
    text = (workdir / "grid.csv").read_text()
    assert "# model_hash=" in text and '"kind": "pointwise"' in text
    data = table(workdir / "grid.csv")
    assert data.size == 9
    p = QubitExampleParams(z0=0.3)
    for t1, t2, v in data:
        if t1 != t2:
            assert v == pytest.approx(kxminus_closed(p, t1, t2), abs=1e-10)


def test_exact_smoothed_evaluations(workdir):
    f = {"kind": "exponential", "center": 0.0, "lam": 10.0}
    cfg = {"model": "qubit.json", "kind": "full",
           "evaluations": [[{"detector": "x", "filter": f}, {"detector": "x", "filter": f}]],
           "out": str(workdir / "full.csv")}
    assert run(workdir, "exact", cfg) == 0
    lines = body(workdir / "full.csv")
    assert lines[-2] == "index,entries,value"
    assert float(lines[-1].rsplit(",", 1)[1]) > 1.25


def test_invalid_efficiency_is_a_config_error(workdir, capsys):
    doc = model_to_dict(qubit_model(QubitExampleParams()))
    doc["channels"][0]["eta"] = 1.5
    (workdir / "bad.json").write_text(json.dumps(doc))
    out = workdir / "never.csv"
    cfg = {"model": "bad.json", "kind": "pointwise",
           "evaluations": [[{"detector": "x", "time": 1.0}]], "out": str(out)}
    assert run(workdir, "exact", cfg) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"
    assert not out.exists()


def test_order_limit_and_unknown_keys(workdir, capsys):
    f = {"kind": "box", "a": 0.0, "b": 1.0}
    cfg = {"model": "qubit.json", "kind": "smoothed",
           "evaluations": [[{"detector": "x", "filter": f}] * 5], "out": str(workdir / "n5.csv")}
    assert run(workdir, "exact", cfg) == 2
    assert "N <= 4" in capsys.readouterr().err
    cfg = {"model": "qubit.json", "kind": "pointwise", "bogus": 1}
    assert run(workdir, "exact", cfg) == 2


def test_coincidence_is_a_numeric_error(workdir, capsys):
    cfg = {"model": "qubit.json", "kind": "pointwise", "out": str(workdir / "c.csv"),
           "evaluations": [[{"detector": "x", "time": 1.0}, {"detector": "x", "time": 1.0}]]}
    assert run(workdir, "exact", cfg) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "numeric"


def test_simulate_is_deterministic(workdir):
    cfg = {"model": "qubit.json", "T": 0.5, "dt": 0.01, "seed": 4, "scheme": "kraus",
           "snapshot_stride": 10, "out": str(workdir / "traj.csv")}
    assert run(workdir, "simulate", cfg) == 0
    first = body(workdir / "traj.csv")
    assert run(workdir, "simulate", cfg) == 0
    assert body(workdir / "traj.csv") == first
    assert (workdir / "traj_snapshots.csv").exists()
    assert run(workdir, "simulate", cfg, "--seed", "5") == 0
    assert body(workdir / "traj.csv") != first


def test_estimate_commands(workdir):
    f0 = {"kind": "exponential", "center": 0.0, "lam": 10.0}
    f1 = {"kind": "exponential", "center": 0.5, "lam": 10.0}
    cfg = {"model": "qubit.json", "method": "ensemble", "trajectories": 20, "seed": 1,
           "entries": [{"detector": "x", "filter": f1}, {"detector": "-", "filter": f0}],
           "out": str(workdir / "ens.csv")}
    assert run(workdir, "estimate", cfg) == 0
    assert body(workdir / "ens.csv")[-2] == "lag,value,stderr,n"
    cfg = {"model": "qubit.json", "method": "ergodic", "detectors": ["x", "x"], "lam": 10.0,
           "lags": [0.0, 0.5], "T_total": 50.0, "burn_in": 5.0, "seed": 2,
           "out": str(workdir / "erg.csv")}
    assert run(workdir, "estimate", cfg) == 0
    rows = body(workdir / "erg.csv")
    assert rows[-2].startswith("0.0,") and rows[-1].startswith("0.5,")


def test_povm_check(workdir):
    cfg = {"model": "qubit.json", "deltas": [0.1, 0.05, 0.025],
           "entries": [{"detector": "x", "time": 0.3}, {"detector": "-", "time": 1.1}],
           "out": str(workdir / "povm.csv")}
    assert run(workdir, "povm-check", cfg) == 0
    text = (workdir / "povm.csv").read_text()
    slope = float(text.split("loglog_slope=")[1].split("\n")[0])
    assert 1.8 <= slope <= 2.2


def test_fit_command(workdir):
    from sigcorr.calibrate import synthetic_observations, write_observations
    obs = synthetic_observations(qubit_model(QubitExampleParams()), [("x", "-")], 10.0,
                                 np.linspace(-1.5, 1.5, 7))
    write_observations(workdir / "obs.csv", obs)
    cfg = {"observations": "obs.csv", "free": {"gamma_x": {"initial": 0.3, "bounds": [0.05, 2]}},
           "out": str(workdir / "fit.json")}
    assert run(workdir, "fit", cfg) == 0
    doc = json.loads((workdir / "fit.json").read_text())
    assert doc["converged"] and doc["estimates"]["gamma_x"] == pytest.approx(0.5, rel=1e-4)
    cfg["budget"] = 10
    cfg["free"]["gamma_minus"] = {"initial": 2.0, "bounds": [0.1, 3]}
    assert run(workdir, "fit", cfg) == 4


def test_reproduce_fig1_short(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["reproduce-fig1", "--out", str(a), "--T", "200", "--scheme", "kraus"]) == 0
    assert main(["reproduce-fig1", "--out", str(b), "--T", "200", "--scheme", "kraus",
                 "--seed", "7"]) == 0
    assert main(["reproduce-fig1", "--out", str(c), "--T", "200", "--scheme", "kraus",
                 "--eta", "0.5"]) == 0
    for d in (a, b, c):
        assert {p.name for p in d.iterdir()} == {"fig1_exact.csv", "fig1_estimate.csv",
                                                 "fig1_summary.json", "plot_fig1.py"}
    ea, eb, ec = (table(d / "fig1_exact.csv") for d in (a, b, c))
    assert np.array_equal(ea["kxx"], eb["kxx"]) and np.array_equal(ea["kxminus"], eb["kxminus"])
    assert not np.array_equal(table(a / "fig1_estimate.csv")["kxx"],
                              table(b / "fig1_estimate.csv")["kxx"])
    i0 = int(np.argmin(np.abs(ea["tau"])))
    assert ec["kxx"][i0] - ea["kxx"][i0] == pytest.approx(1.25, abs=1e-9)
    assert np.abs(ec["kxminus"] - ea["kxminus"]).max() < 1e-9
    summary = json.loads((a / "fig1_summary.json").read_text())
    assert summary["equal_point_increment_tau0"] == pytest.approx(1.25, abs=1e-9)
