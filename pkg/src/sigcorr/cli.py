"""Command-line interface.

Every subcommand except ``reproduce-fig1`` reads a JSON run configuration,
validates it, and writes CSV (or JSON) output with a ``#`` header carrying
the model hash and a full parameter echo. Flags ``--dt``, ``--seed``,
``--eta`` and ``--out`` override the configuration.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 fit did not converge. Errors are reported on stderr as one JSON object
``{"error": <category>, "message": ...}``.
"""

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .calibrate import fit, qubit_fit_problem, read_observations, write_fit_result
from .densemath import QuadratureError
from .estimators import (
    ensemble_estimate,
    ergodic_curves,
    loglog_slope,
    povm_oracle,
    richardson,
    write_estimates_csv,
)
from .exact import STATIONARY, full_correlator, pointwise_correlator, smoothed_correlator
from .filters import ExponentialFilter, filter_from_dict
from .model import ModelError, _matrix_from_json, load_model, model_hash, stationary_state
from .reference import QubitExampleParams, kxminus_filtered, qubit_model
from .schemas import validate
from .trajectories import simulate, simulate_linear, validate_density, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CONVERGENCE = 0, 2, 3, 4

FIG1 = {"gamma_minus": 1.0, "gamma_x": 0.5, "eta": 1.0, "lam": 10.0, "dt": 1e-3,
        "T_total": 1e4, "seed": 1, "burn_in": 10.0, "n_lags": 61, "lag_max": 3.0}


class ConfigError(Exception):
    pass


class ConvergenceError(Exception):
    pass


# --- helpers -----------------------------------------------------------------

def _load_config(path, kind, args):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    for key in ("dt", "seed", "eta", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        validate(cfg, kind)
    except jsonschema.ValidationError as exc:
        loc = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"{loc}: {exc.message}") from None
    base = Path(path).resolve().parent
    for key in ("model", "observations"):
        if key in cfg and not os.path.isabs(cfg[key]):
            cfg[key] = str(base / cfg[key])
    return cfg


def _model(cfg):
    try:
        model = load_model(cfg["model"])
    except OSError as exc:
        raise ConfigError(f"cannot read model: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file is not valid JSON: {exc}") from None
    if "eta" in cfg:
        model = model.with_efficiencies([cfg["eta"]] * len(model.channels))
    return model


def _rho0(cfg, model):
    state = cfg.get("initial_state", STATIONARY)
    if state == STATIONARY:
        return STATIONARY
    rho = _matrix_from_json(state["matrix"], model.dim, "initial state")
    try:
        return validate_density(rho, model.dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _header(command, cfg, model=None):
    lines = [f"sigcorr {__version__} command={command}"]
    if model is not None:
        lines.append(f"model_hash={model_hash(model)}")
    lines.append("params=" + json.dumps(cfg, sort_keys=True))
    lines.append("generated=" + datetime.datetime.now(datetime.timezone.utc).isoformat())
    return lines


def _entries(model, items, with_filter):
    out = []
    for e in items:
        det = e["detector"]
        if with_filter:
            if "filter" not in e:
                raise ConfigError("entry lacks a filter")
            try:
                out.append((det, filter_from_dict(e["filter"])))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"bad filter: {exc}") from None
        else:
            if "time" not in e:
                raise ConfigError("entry lacks a time")
            out.append((det, float(e["time"])))
        try:
            model.channel_index(det)
        except (KeyError, IndexError, ModelError) as exc:
            raise ConfigError(f"unknown detector {det!r}: {exc}") from None
    return out


def _write(path, header, columns, rows):
    """Write CSV atomically so that failures leave no partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else repr(v) for v in row) + "\n")
    os.replace(tmp, path)


def _out(cfg, default):
    return cfg.get("out", default)


# --- commands ----------------------------------------------------------------

def cmd_exact(args):
    cfg = _load_config(args.config, "exact", args)
    model = _model(cfg)
    rho0 = _rho0(cfg, model)
    kind = cfg["kind"]
    tol = cfg.get("tol", 1e-8)
    rows = []
    if "grid" in cfg:
        if kind != "pointwise":
            raise ConfigError("grid requests are pointwise only")
        a, b = cfg["grid"]["detectors"]
        for t1 in cfg["grid"]["t1"]:
            for t2 in cfg["grid"]["t2"]:
                rows.append([repr(float(t1)), repr(float(t2)),
                             pointwise_correlator(model, [(a, t1), (b, t2)], rho0)])
        columns = ["t1", "t2", "value"]
    else:
        for i, ev in enumerate(cfg.get("evaluations", [])):
            if kind == "pointwise":
                value = pointwise_correlator(model, _entries(model, ev, False), rho0)
            else:
                entries = _entries(model, ev, True)
                fn = smoothed_correlator if kind == "smoothed" else full_correlator
                try:
                    value = fn(model, entries, rho0, tol=tol)
                except ValueError as exc:
                    if "limited to N" in str(exc):
                        raise ConfigError(str(exc)) from None
                    raise
            rows.append([str(i), '"' + json.dumps(ev, sort_keys=True).replace('"', "'") + '"',
                         value])
        columns = ["index", "entries", "value"]
    _write(_out(cfg, "exact.csv"), _header("exact", cfg, model), columns, rows)
    return EXIT_OK


def cmd_simulate(args):
    cfg = _load_config(args.config, "simulate", args)
    model = _model(cfg)
    rho0 = _rho0(cfg, model)
    if rho0 is STATIONARY:
        rho0 = stationary_state(model)
    dt = cfg.get("dt", 1e-3)
    seed = cfg.get("seed", 0)
    stride = cfg.get("snapshot_stride", 0)
    mode = cfg.get("mode", "nonlinear")
    if mode == "nonlinear":
        tol = cfg.get("positivity_tol", -1e-3)
        traj = simulate(model, rho0, dt, cfg["T"], seed, stride,
                        scheme=cfg.get("scheme", "euler"), positivity_tol=tol)
    else:
        traj = simulate_linear(model, rho0, dt, cfg["T"], seed,
                               mode="physical-noise" if mode == "linear-physical" else "wiener-driven",
                               snapshot_stride=stride, scheme=cfg.get("scheme", "euler"))
    out = Path(_out(cfg, "trajectory.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    side = out.with_name(out.stem + "_snapshots.csv") if stride else None
    write_trajectory_csv(traj, out, model_hash(model), side, _header("simulate", cfg, model))
    return EXIT_OK


def cmd_estimate(args):
    cfg = _load_config(args.config, "estimate", args)
    model = _model(cfg)
    rho0 = _rho0(cfg, model)
    dt = cfg.get("dt", 1e-3)
    seed = cfg.get("seed", 0)
    header = _header("estimate", cfg, model)
    if cfg["method"] == "ensemble":
        if "entries" not in cfg or "trajectories" not in cfg:
            raise ConfigError("ensemble estimation needs entries and trajectories")
        est = ensemble_estimate(model, _entries(model, cfg["entries"], True),
                                cfg["trajectories"], dt, seed, rho0,
                                workers=cfg.get("workers", 1))
        rows = [(0.0, est)]
    else:
        for key in ("detectors", "lam", "lags", "T_total"):
            if key not in cfg:
                raise ConfigError(f"ergodic estimation needs {key!r}")
        pair = tuple(cfg["detectors"])
        curve = ergodic_curves(model, [pair], cfg["lam"], cfg["lags"], cfg["T_total"], dt, seed,
                               burn_in=cfg.get("burn_in", 10.0), stride=cfg.get("stride"),
                               rho0=rho0)[pair]
        rows = list(zip(curve.lags, curve.estimates))
    out = Path(_out(cfg, "estimate.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_estimates_csv(out, rows, header)
    return EXIT_OK


def cmd_povm_check(args):
    cfg = _load_config(args.config, "povm-check", args)
    model = _model(cfg)
    rho0 = _rho0(cfg, model)
    entries = _entries(model, cfg["entries"], False)
    exact = pointwise_correlator(model, entries, rho0)
    deltas = sorted(cfg["deltas"], reverse=True)
    values = [povm_oracle(model, entries, d, rho0) for d in deltas]
    errors = [v - exact for v in values]
    rows = [[d, v, e] for d, v, e in zip(deltas, values, errors)]
    header = _header("povm-check", cfg, model)
    header.append(f"pointwise={exact!r}")
    if len(deltas) >= 2 and all(e != 0 for e in errors):
        header.append(f"loglog_slope={loglog_slope(deltas, errors)!r}")
    ratio = deltas[-2] / deltas[-1]
    header.append(f"richardson={richardson(values[-2], values[-1], ratio)!r}")
    _write(_out(cfg, "povm.csv"), header, ["delta", "value", "error"], rows)
    return EXIT_OK


def cmd_fit(args):
    cfg = _load_config(args.config, "fit", args)
    try:
        obs = read_observations(cfg["observations"])
    except OSError as exc:
        raise ConfigError(f"cannot read observations: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad observation file: {exc}") from None
    free = {k: (v["initial"], tuple(v["bounds"])) for k, v in cfg["free"].items()}
    try:
        problem = qubit_fit_problem(obs, free, cfg.get("fixed"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = fit(problem, budget=cfg.get("budget", 2000))
    out = Path(_out(cfg, "fit.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fit_result(out, result)
    if not result.converged:
        raise ConvergenceError(result.message)
    return EXIT_OK


_PLOT_SCRIPT = '''"""Plot the curves written by `sigcorr reproduce-fig1`."""
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent


def load(name):
    lines = [ln for ln in (here / name).read_text().splitlines() if not ln.startswith("#")]
    return np.genfromtxt(lines, delimiter=",", names=True)


ex = load("fig1_exact.csv")
est = load("fig1_estimate.csv")
fig, ax = plt.subplots(1, 2, figsize=(9, 3.5))
for a, key, title in ((ax[0], "kxminus", "K_x,-"), (ax[1], "kxx", "K_x,x")):
    a.plot(ex["tau"], ex[key], "k-", label="exact")
    a.errorbar(est["tau"], est[key], yerr=est[key + "_stderr"], fmt=".", label="one trajectory")
    a.set_xlabel("tau")
    a.set_title(title)
    a.legend()
fig.tight_layout()
fig.savefig(here / "fig1.png", dpi=150)
'''


def cmd_reproduce_fig1(args):
    p = dict(FIG1)
    for key in ("eta", "dt", "seed"):
        if getattr(args, key) is not None:
            p[key] = getattr(args, key)
    if args.T is not None:
        p["T_total"] = args.T
    if not 0 < p["eta"] <= 1 or not p["dt"] > 0 or not p["T_total"] > 0:
        raise ConfigError("need 0 < eta <= 1, dt > 0, T > 0")
    scheme = args.scheme
    out = Path(args.out or "fig1")
    out.mkdir(parents=True, exist_ok=True)

    params = QubitExampleParams(p["gamma_x"], p["gamma_minus"], p["eta"], p["eta"])
    model = qubit_model(params)
    lam = p["lam"]
    lags = np.round(np.linspace(-p["lag_max"], p["lag_max"], p["n_lags"]), 12)

    def pair(a, b, tau):
        return [(a, ExponentialFilter(float(tau), lam)), (b, ExponentialFilter(0.0, lam))]

    kxm = [full_correlator(model, pair("x", "-", t), tol=1e-10) for t in lags]
    kxm_closed = [kxminus_filtered(params, float(t), lam) for t in lags]
    kxx_s = [smoothed_correlator(model, pair("x", "x", t), tol=1e-10) for t in lags]
    kxx = [full_correlator(model, pair("x", "x", t), tol=1e-10) for t in lags]

    curves = ergodic_curves(model, [("x", "-"), ("x", "x")], lam, lags, p["T_total"], p["dt"],
                            p["seed"], burn_in=p["burn_in"], scheme=scheme)
    cm, cx = curves[("x", "-")], curves[("x", "x")]

    echo = {**p, "scheme": scheme}
    header = _header("reproduce-fig1", echo, model)
    _write(out / "fig1_exact.csv", header,
           ["tau", "kxminus", "kxminus_closed", "kxx", "kxx_smoothed"],
           zip(map(float, lags), kxm, kxm_closed, kxx, kxx_s))
    _write(out / "fig1_estimate.csv", header,
           ["tau", "kxminus", "kxminus_stderr", "kxx", "kxx_stderr", "n"],
           ([float(t), a.value, a.stderr, b.value, b.stderr, str(a.n_samples)]
            for t, a, b in zip(lags, cm.estimates, cx.estimates)))

    def worst(est, exact):
        return max(abs(e.zscore(x)) for e, x in zip(est, exact))

    i0 = int(np.argmin(np.abs(lags)))
    summary = {
        "params": echo,
        "model_hash": model_hash(model),
        "max_z_kxminus": worst(cm.estimates, kxm),
        "max_z_kxx": worst(cx.estimates, kxx),
        "equal_point_increment_tau0": kxx[i0] - kxx_s[i0],
        "expected_increment": lam / (8 * p["eta"]),
        "min_eigenvalue": cm.min_eigenvalue,
    }
    summary["all_within_4sigma"] = bool(max(summary["max_z_kxminus"], summary["max_z_kxx"]) < 4)
    with open(out / "fig1_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (out / "plot_fig1.py").write_text(_PLOT_SCRIPT)
    print(json.dumps({k: v for k, v in summary.items() if k != "params"}, sort_keys=True))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="sigcorr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"sigcorr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="JSON run configuration")
        p.add_argument("--dt", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--eta", type=float, help="set every detector efficiency")
        p.add_argument("--out", help="output path")

    for name, fn, text in (
        ("exact", cmd_exact, "exact correlators (pointwise, smoothed or full)"),
        ("simulate", cmd_simulate, "simulate one trajectory and dump its record"),
        ("estimate", cmd_estimate, "Monte Carlo correlator estimate (ensemble or ergodic)"),
        ("fit", cmd_fit, "fit qubit rates and efficiencies to observed curves"),
        ("povm-check", cmd_povm_check, "binary weak-measurement oracle vs pointwise value"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("reproduce-fig1", help="exact and one-trajectory K_x,- and K_x,x curves")
    common(p, config=False)
    p.add_argument("--T", type=float, help="trajectory length (default 1e4)")
    p.add_argument("--scheme", choices=("euler", "kraus"), default="euler")
    p.set_defaults(func=cmd_reproduce_fig1)
    return ap


def _fail(category, message, code):
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except ConvergenceError as exc:
        return _fail("convergence", str(exc), EXIT_CONVERGENCE)
    except (ArithmeticError, QuadratureError, np.linalg.LinAlgError) as exc:
        return _fail("numeric", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except ValueError as exc:
        return _fail("numeric", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
