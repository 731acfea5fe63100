"""Monte Carlo estimators of signal correlators, and the deterministic
binary-POVM oracle.

``ensemble_estimate`` averages ``prod_i I_{l_i}(f_i)`` over independent
trajectories; ``ergodic_estimate`` time-averages products of the filtered
signal along one long stationary trajectory; ``importance_sampling_estimate``
uses the linear equation driven by raw Wiener increments, weighted by
``tr[rho_lin(T)]``; ``povm_oracle`` sums over the outcomes of weak binary
measurements exactly, with no sampling.
"""

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .densemath import kron, vec
from .exact import STATIONARY, CoincidenceError, initial_state
from .filters import TAIL_EFOLDS, apply, exponential_signal
from .model import propagator, stationary_state
from .trajectories import _NonlinearRun, iter_signal_chunks, simulate_linear

__all__ = [
    "EstimateWithError",
    "ErgodicCurve",
    "ensemble_estimate",
    "ergodic_estimate",
    "ergodic_curves",
    "importance_sampling_estimate",
    "povm_oracle",
    "richardson",
    "loglog_slope",
    "write_estimates_csv",
]


@dataclass(frozen=True)
class EstimateWithError:
    """Sample mean with its standard error ``std / sqrt(n)``."""

    value: float
    stderr: float
    n_samples: int
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.stderr >= 0:
            raise ValueError("stderr must be non-negative")

    @classmethod
    def from_samples(cls, samples, **extra):
        x = np.asarray(samples, dtype=float)
        n = x.size
        if n < 2:
            raise ValueError("need at least two samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)), n, extra)

    def zscore(self, reference):
        if self.stderr == 0:
            return 0.0 if self.value == reference else math.inf
        return (self.value - reference) / self.stderr


@dataclass(frozen=True, eq=False)
class ErgodicCurve:
    detectors: tuple
    lam: float
    lags: np.ndarray
    estimates: tuple
    min_eigenvalue: float = None

    @property
    def values(self):
        return np.array([e.value for e in self.estimates])

    @property
    def stderrs(self):
        return np.array([e.stderr for e in self.estimates])


# --- ensemble ----------------------------------------------------------------

def _horizon(filters, stationary):
    lo = min(f.support[0] for f in filters)
    hi = max(f.support[1] for f in filters)
    t0 = lo if stationary else 0.0
    if hi <= t0:
        raise ValueError("filters must have support after the initial time")
    return t0, hi


def _children(seed, M):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(M)


def _map(fn, items, workers):
    if workers is None or workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def ensemble_estimate(model, entries, M, dt, seed, rho0=STATIONARY, workers=1,
                      scheme="kraus", positivity_tol=None):
    """``E[prod_i I_{l_i}(f_i)]`` from ``M`` independent nonlinear trajectories.

    ``entries`` is a sequence of ``(detector, filter)``. With ``STATIONARY``
    every trajectory starts in the stationary state at the left edge of the
    earliest filter support; with an explicit ``rho0`` it starts at time 0
    and filters are cut there. Trajectory ``i`` uses the ``i``-th child of
    ``SeedSequence(seed)``, so the result does not depend on ``workers``.

    The default Kraus step keeps every state positive; with
    ``scheme="euler"`` rare efficient-measurement paths leave the positive
    cone and diverge, which aborts the estimate. Positivity is only monitored
    by default and the smallest eigenvalue met is reported in
    ``extra["min_eigenvalue"]``.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    dets = [model.channel_index(d) for d, _ in entries]
    filters = [f for _, f in entries]
    stationary = isinstance(rho0, str)
    rho = initial_state(model, rho0)
    t0, t1 = _horizon(filters, stationary)
    n_steps = int(math.ceil((t1 - t0) / dt - 1e-9)) + 1
    origin = None if stationary else 0.0

    def one(child):
        run = _NonlinearRun(model, rho, dt, child, scheme, positivity_tol)
        dr = run.advance(n_steps)
        prod = 1.0
        for k, f in zip(dets, filters):
            prod *= apply(f, dr[:, k], dt, t0=t0, origin=origin)
        return prod, run.min_ev[0]

    out = _map(one, _children(seed, M), workers)
    samples = np.array([p for p, _ in out])
    return EstimateWithError.from_samples(
        samples, min_eigenvalue=float(min(e for _, e in out)), dt=dt, seed=seed)


def importance_sampling_estimate(model, entries, M, dt, seed, rho0=STATIONARY, workers=1,
                                 scheme="kraus"):
    """``E_W[prod_i I_{l_i}(f_i) tr[rho_lin(T)]]`` with the signals taken as
    scaled raw Wiener processes and ``rho_lin`` their linear evolution.

    An independent route to the full correlator: the weight turns the
    Wiener measure into the physical law of the record. The default Kraus
    step keeps the weights positive; Euler weights can cross zero and abort
    the path when the measurement is efficient.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    dets = [model.channel_index(d) for d, _ in entries]
    filters = [f for _, f in entries]
    stationary = isinstance(rho0, str)
    rho = initial_state(model, rho0)
    t0, t1 = _horizon(filters, stationary)
    T = (int(math.ceil((t1 - t0) / dt - 1e-9)) + 1) * dt
    origin = None if stationary else 0.0

    def one(child):
        tr = simulate_linear(model, rho, dt, T, child, mode="wiener-driven", scheme=scheme)
        prod = tr.final_weight
        for k, f in zip(dets, filters):
            prod *= apply(f, tr.dr[:, k], dt, t0=t0, origin=origin)
        return prod

    samples = _map(one, _children(seed, M), workers)
    return EstimateWithError.from_samples(samples, dt=dt, seed=seed)


# --- ergodic -----------------------------------------------------------------

def _batch_stats(values, batch, nb):
    sums = np.bincount(batch, weights=values, minlength=nb)
    counts = np.bincount(batch, minlength=nb)
    keep = counts > 0
    means = sums[keep] / counts[keep]
    k = means.size
    if k < 2:
        raise ValueError("not enough batches; increase T_total")
    return float(values.mean()), float(means.std(ddof=1) / math.sqrt(k)), int(values.size)


def ergodic_curves(model, pairs, lam, lags, T_total, dt, seed, burn_in=10.0, stride=None,
                   rho0=STATIONARY, n_batches=None, scheme="euler", positivity_tol=None):
    """Time-averaged ``K_{a,b}(f^tau, f^0)`` for several detector pairs from one
    trajectory.

    For each pair ``(a, b)`` and lag ``tau`` the estimate averages
    ``I_a(f^{t+tau}) I_b(f^t)`` over sample times ``t = burn_in + n stride``
    with both ``t`` and ``t + tau`` in ``[burn_in, T_total]``. ``f`` is the
    exponential kernel of bandwidth ``lam``; ``stride`` defaults to one
    support length ``TAIL_EFOLDS / lam``. Lags and stride are rounded to
    the ``dt`` grid.

    Error bars come from batch means over ``n_batches`` contiguous time
    blocks (default ``round(sqrt(T_total))``), which accounts for the
    autocorrelation of the filtered signals.

    The default scheme is the naive Euler step. It leaves the positive cone
    by a wide margin at unit efficiency while keeping the two-point
    statistics right; positivity is monitored only (``min_eigenvalue`` on
    the result). Pass ``scheme="kraus"`` for a positivity-preserving run.

    Refuses models without a unique stationary state.
    """
    stationary_state(model)  # raises NonUniqueStationaryState
    rho = initial_state(model, rho0)
    pairs = [tuple(p) for p in pairs]
    idx = {d: model.channel_index(d) for p in pairs for d in p}
    lags = np.asarray(lags, dtype=float)
    stride = TAIL_EFOLDS / lam if stride is None else float(stride)
    n_steps = int(round(T_total / dt))
    lag_steps = np.rint(lags / dt).astype(np.int64)
    stride_steps = max(1, int(round(stride / dt)))
    burn_steps = int(round(burn_in / dt))
    g = math.gcd(stride_steps, burn_steps, *(abs(int(x)) for x in lag_steps))

    cols = sorted(set(idx.values()))
    kept = []
    y_last = np.zeros(len(cols))
    pos = 0
    min_ev = math.inf
    for dr, run in iter_signal_chunks(model, rho, dt, n_steps, seed, scheme=scheme,
                                      positivity_tol=positivity_tol):
        y = exponential_signal(lam, dr[:, cols], dt, y0=y_last)
        y_last = y[-1]
        first = (-pos) % g
        kept.append(y[first::g])
        pos += dr.shape[0]
        min_ev = float(run.min_ev[0])
    Y = np.concatenate(kept)  # Y[j] = I(f^{j g dt})
    col = {c: j for j, c in enumerate(cols)}

    L = Y.shape[0]
    b0 = burn_steps // g
    S = stride_steps // g
    ls = lag_steps // g
    span = max(L - b0, 1)
    nb = n_batches or max(2, int(round(math.sqrt(T_total))))
    samples = np.arange(b0, L, S)
    out = {}
    for a, b in pairs:
        ya, yb = Y[:, col[idx[a]]], Y[:, col[idx[b]]]
        ests = []
        for lag, ell in zip(lags, ls):
            s = samples[(samples + ell >= b0) & (samples + ell < L)]
            vals = ya[s + ell] * yb[s]
            batch = np.minimum((s - b0) * nb // span, nb - 1)
            v, se, n = _batch_stats(vals, batch, nb)
            ests.append(EstimateWithError(v, se, n, {"lag": float(lag)}))
        out[(a, b)] = ErgodicCurve((a, b), lam, lags, tuple(ests), min_ev)
    return out


def ergodic_estimate(model, detectors, lam, lags, T_total, dt, seed, burn_in=10.0,
                     stride=None, rho0=STATIONARY, n_batches=None, scheme="euler",
                     positivity_tol=None):
    """Single-pair version of :func:`ergodic_curves`; returns an :class:`ErgodicCurve`."""
    pair = tuple(detectors)
    return ergodic_curves(model, [pair], lam, lags, T_total, dt, seed, burn_in, stride,
                          rho0, n_batches, scheme, positivity_tol)[pair]


# --- POVM oracle ---------------------------------------------------------------

def _povm_insertion(c, delta):
    # [M+ (.) M+^+ - M- (.) M-^+] / delta with M± = (1 ± delta c - delta^2 c^+c / 2) / sqrt 2
    d = c.shape[0]
    A = np.eye(d) - 0.5 * delta**2 * (c.conj().T @ c)
    return kron(c, A.conj()) + kron(A, c.conj())


def povm_oracle(model, entries, delta, rho0=STATIONARY):
    """Outcome-summed binary weak-measurement correlator.

    At each ``(detector, time)`` a two-outcome measurement with Kraus
    operators ``M_pm = (1 pm delta c - delta^2 c^+ c / 2) / sqrt(2)`` is
    made; ``E[R_1 ... R_N] / delta^N`` is computed exactly as a trace and
    divided by ``2^N``. The result differs from
    :func:`exact.pointwise_correlator` by ``O(delta^2)``.

    Conventions for coincident times match the pointwise correlator.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    dets = [model.channel_index(d) for d, _ in entries]
    times = [float(t) for _, t in entries]
    stationary = isinstance(rho0, str)
    if not stationary and times and min(times) < 0:
        raise ValueError("time points must be >= 0 for an explicit initial state")
    if len(set(zip(dets, times))) < len(dets):
        raise CoincidenceError("same detector twice at one instant")
    norms = [np.linalg.norm(model.channels[k].c, 2) for k in set(dets)]
    if norms and delta * max(norms) > 0.3:
        warnings.warn(f"delta*|c| = {delta * max(norms):.3g} > 0.3: weak-measurement "
                      "expansion is poor", RuntimeWarning, stacklevel=2)
    S = {k: _povm_insertion(model.channels[k].c, delta) for k in set(dets)}
    prop = propagator(model)
    rho_vec = vec(initial_state(model, rho0))
    tr_row = vec(np.eye(model.dim))

    order = sorted(range(len(dets)), key=lambda i: times[i])
    groups = [list(g) for _, g in itertools.groupby(order, key=lambda i: times[i])]
    total, count = 0.0, 0
    for choice in itertools.product(*(itertools.permutations(g) for g in groups)):
        seq = [i for grp in choice for i in grp]
        v = rho_vec
        prev = None if stationary else 0.0
        for i in seq:
            if prev is not None and times[i] > prev:
                v = prop(times[i] - prev) @ v
            v = S[dets[i]] @ v
            prev = times[i]
        total += tr_row @ v
        count += 1
    value = total / count / 2 ** len(dets)
    return float(value.real)


def richardson(coarse, fine, ratio=2.0, order=2):
    """Extrapolate ``F(h) = F0 + a h^order`` from ``F(h)`` and ``F(h/ratio)``."""
    r = ratio**order
    return (r * fine - coarse) / (r - 1)


def loglog_slope(x, y):
    """Least-squares slope of ``log|y|`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.abs(y)), 1)[0])


def write_estimates_csv(path, rows, header_lines=()):
    """Write ``(lag, value, stderr, n)`` rows; ``rows`` yields ``(lag, EstimateWithError)``."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("lag,value,stderr,n\n")
        for lag, e in rows:
            fh.write(f"{float(lag)!r},{e.value!r},{e.stderr!r},{e.n_samples}\n")
