"""Fit rates and efficiencies to measured two-point correlator curves.

Observations are points ``K_{a,b}(f^lag, f^0)`` of stationary correlators
with exponential kernels of bandwidth ``lam``. The objective is the
weighted sum ``sum_i w_i (observed_i - predicted_i)^2 / stderr_i^2``,
minimized by a bounded Nelder-Mead search in parameters scaled to
``[0, 1]``.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .exact import STATIONARY, full_correlator
from .filters import ExponentialFilter
from .reference import QubitExampleParams, qubit_model

__all__ = [
    "Observation",
    "FitProblem",
    "FitResult",
    "predict_curves",
    "qubit_fit_problem",
    "synthetic_observations",
    "observations_from_curves",
    "fit",
    "read_observations",
    "write_observations",
]

STALL_XTOL = 1e-6
IDENTIFIABILITY_RTOL = 1e-9
FD_STEP = 1e-4
_FIELDS = ("detector_a", "detector_b", "lambda", "lag", "value", "stderr")


@dataclass(frozen=True)
class Observation:
    """Measured ``K_{a,b}(f^lag, f^0)`` with its standard error."""

    detector_a: str
    detector_b: str
    lam: float
    lag: float
    value: float
    stderr: float

    def __post_init__(self):
        if not self.stderr > 0:
            raise ValueError("stderr must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    def entries(self):
        return [(self.detector_a, ExponentialFilter(self.lag, self.lam)),
                (self.detector_b, ExponentialFilter(0.0, self.lam))]


def predict_curves(model, observations, tol=1e-9):
    """Exact stationary correlator for every observation (the measured
    ``value`` is ignored)."""
    return np.array([full_correlator(model, ob.entries(), STATIONARY, tol=tol)
                     for ob in observations])


def _is_efficiency(name):
    return name.startswith("eta")


@dataclass(eq=False)
class FitProblem:
    """Free parameters with bounds and initial values, fixed parameters, and
    observations.

    ``build`` maps a dict of all parameters to a :class:`SystemModel`.
    Parameters whose name starts with ``eta`` are efficiencies and must be
    bounded inside ``(0, 1]``; all others are rates bounded below by 0.
    """

    build: object
    free: dict
    observations: tuple
    fixed: dict = field(default_factory=dict)
    weights: np.ndarray = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.observations = tuple(self.observations)
        self.free = {k: (float(v[0]), (float(v[1][0]), float(v[1][1])))
                     for k, v in self.free.items()}
        if not self.free:
            raise ValueError("no free parameters")
        for name, (x0, (lo, hi)) in self.free.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"{name}: bounds must be finite with lo < hi")
            if _is_efficiency(name) and not (0 < lo and hi <= 1):
                raise ValueError(f"{name}: efficiency bounds must lie in (0, 1]")
            if not _is_efficiency(name) and lo < 0:
                raise ValueError(f"{name}: rate bounds must be >= 0")
            if not lo <= x0 <= hi:
                raise ValueError(f"{name}: initial value {x0} outside [{lo}, {hi}]")
        if len(self.observations) < len(self.free):
            raise ValueError("fewer observations than free parameters")
        n = len(self.observations)
        w = np.ones(n) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (n,) or np.any(w < 0):
            raise ValueError("weights must be non-negative, one per observation")
        self.weights = w

    @property
    def names(self):
        return tuple(self.free)

    def _bounds(self):
        lo = np.array([b[0] for _, b in self.free.values()])
        hi = np.array([b[1] for _, b in self.free.values()])
        return lo, hi

    def unscale(self, x):
        lo, hi = self._bounds()
        return lo + np.clip(x, 0.0, 1.0) * (hi - lo)

    def scale(self, theta):
        lo, hi = self._bounds()
        return (np.asarray(theta, float) - lo) / (hi - lo)

    def parameters(self, theta):
        return {**self.fixed, **dict(zip(self.names, map(float, theta)))}

    def predict(self, theta):
        key = tuple(float(t) for t in theta)
        if key not in self._cache:
            model = self.build(self.parameters(key))
            self._cache[key] = predict_curves(model, self.observations)
        return self._cache[key]

    def residuals(self, theta):
        obs = np.array([o.value for o in self.observations])
        se = np.array([o.stderr for o in self.observations])
        return np.sqrt(self.weights) * (obs - self.predict(theta)) / se

    def objective(self, theta):
        # fsum is correctly rounded, hence independent of the observation order
        return math.fsum(self.residuals(theta) ** 2)


def qubit_fit_problem(observations, free, fixed=None, weights=None):
    """:class:`FitProblem` for the two-detector qubit (detectors ``"x"`` and ``"-"``).

    ``free`` maps any of ``gamma_minus, gamma_x, eta_x, eta_minus`` to
    ``(initial, (lo, hi))``; the remaining ones take ``fixed`` values or the
    :class:`QubitExampleParams` defaults.
    """
    def build(p):
        return qubit_model(QubitExampleParams(**p))

    return FitProblem(build, dict(free), tuple(observations), dict(fixed or {}), weights)


@dataclass(frozen=True)
class FitResult:
    estimates: dict
    residual: float
    sensitivity: dict
    identifiable: dict
    converged: bool
    n_evaluations: int
    n_observations: int
    message: str = ""

    @property
    def dof(self):
        return self.n_observations - len(self.estimates)

    def to_dict(self):
        return {
            "estimates": self.estimates,
            "residual": self.residual,
            "dof": self.dof,
            "sensitivity": self.sensitivity,
            "identifiable": self.identifiable,
            "converged": self.converged,
            "n_evaluations": self.n_evaluations,
            "message": self.message,
        }


def _jacobian(problem, x):
    cols = []
    for j in range(x.size):
        h = FD_STEP
        lo_x, hi_x = x.copy(), x.copy()
        lo_x[j] = max(0.0, x[j] - h)
        hi_x[j] = min(1.0, x[j] + h)
        r_hi = problem.residuals(problem.unscale(hi_x))
        r_lo = problem.residuals(problem.unscale(lo_x))
        cols.append((r_hi - r_lo) / (hi_x[j] - lo_x[j]))
    return np.column_stack(cols)


def identifiability(problem, theta):
    """Per-parameter Gauss-Newton curvature ``2 |dr/dx_j|^2`` (scaled units)
    and the identifiability flags.

    A parameter is unidentifiable when its finite-difference sensitivity
    vanishes relative to the largest one.
    """
    J = _jacobian(problem, problem.scale(theta))
    norms = np.linalg.norm(J, axis=0)
    thresh = IDENTIFIABILITY_RTOL * max(1.0, norms.max())
    curv = {n: float(2 * v**2) for n, v in zip(problem.names, norms)}
    ident = {n: bool(v > thresh) for n, v in zip(problem.names, norms)}
    return curv, ident


def fit(problem, budget=2000, restarts=3):
    """Bounded Nelder-Mead fit with restart on stall.

    The search runs in scaled coordinates clamped to ``[0, 1]`` and stops
    when the simplex diameter falls below ``1e-6``; it is then restarted
    from the best point with a fresh simplex until a restart brings no
    improvement. Running out of ``budget`` objective evaluations first
    gives ``converged=False`` with the best point found. Deterministic.
    """
    n = len(problem.free)
    x = problem.scale([v[0] for v in problem.free.values()])
    evals = 0
    best_f = math.inf
    converged = False
    message = ""
    step = 0.1
    for attempt in range(restarts + 1):
        remaining = budget - evals
        if remaining <= n + 1:
            message = "evaluation budget exhausted"
            break
        simplex = np.vstack([x] + [x + step * np.sign(0.5 - x[j] + 1e-12) * np.eye(n)[j]
                                   for j in range(n)])
        res = scipy.optimize.minimize(
            lambda z: problem.objective(problem.unscale(z)), x, method="Nelder-Mead",
            bounds=[(0.0, 1.0)] * n,
            options={"xatol": STALL_XTOL, "fatol": math.inf, "maxfev": remaining,
                     "initial_simplex": np.clip(simplex, 0.0, 1.0)},
        )
        evals += int(res.nfev)
        stalled = res.status == 0
        improved = res.fun < best_f * (1 - 1e-12) - 1e-300
        if res.fun <= best_f:
            x, best_f = np.clip(res.x, 0.0, 1.0), float(res.fun)
        if not stalled:
            message = "evaluation budget exhausted"
            break
        if attempt > 0 and not improved:
            converged = True
            message = "simplex diameter below tolerance"
            break
        step = 0.02
    else:
        converged = True
        message = "simplex diameter below tolerance (restart limit reached)"
    theta = problem.unscale(x)
    curv, ident = identifiability(problem, theta)
    return FitResult(
        estimates=dict(zip(problem.names, map(float, theta))),
        residual=float(best_f),
        sensitivity=curv,
        identifiable=ident,
        converged=converged,
        n_evaluations=evals,
        n_observations=len(problem.observations),
        message=message,
    )


def synthetic_observations(model, pairs, lam, lags, stderr=1.0):
    """Noiseless observations generated by the exact engine."""
    obs = [Observation(a, b, lam, float(t), 0.0, stderr) for a, b in pairs for t in lags]
    values = predict_curves(model, obs)
    return [Observation(o.detector_a, o.detector_b, lam, o.lag, float(v), stderr)
            for o, v in zip(obs, values)]


def observations_from_curves(curves):
    """Observations from :class:`estimators.ErgodicCurve` objects."""
    out = []
    for c in curves:
        a, b = c.detectors
        for lag, e in zip(c.lags, c.estimates):
            out.append(Observation(str(a), str(b), float(c.lam), float(lag), e.value, e.stderr))
    return out


def read_observations(path):
    """Read a CSV with columns ``detector_a, detector_b, lambda, lag, value, stderr``;
    lines starting with ``#`` are ignored."""
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = set(_FIELDS) - set(rows.fieldnames or ())
        if missing:
            raise ValueError(f"observation file lacks columns {sorted(missing)}")
        return [Observation(r["detector_a"], r["detector_b"], float(r["lambda"]),
                            float(r["lag"]), float(r["value"]), float(r["stderr"]))
                for r in rows]


def write_observations(path, observations, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIELDS)
        for o in observations:
            w.writerow([o.detector_a, o.detector_b, repr(o.lam), repr(o.lag),
                        repr(o.value), repr(o.stderr)])


def write_fit_result(path, result):
    with open(path, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
