"""Exact signal correlators.

Pointwise correlators are traces of alternating propagators and insertions,

    K(t_1, ..., t_N) = 2^-N tr[c+_N Phi_{t_N - t_{N-1}} ... c+_1 Phi_{t_1} rho0]

for ordered times. Smoothed correlators integrate them against test
functions; the full correlator adds the same-detector white-noise
contractions (pairings) on top.
"""

import itertools
import math
from functools import lru_cache

import numpy as np

from .densemath import QuadratureError, gauss_legendre, pair_partitions, vec
from .filters import ExponentialFilter, overlap
from .model import insertion, propagator, stationary_state

__all__ = [
    "STATIONARY",
    "CoincidenceError",
    "MAX_SMOOTHED_ORDER",
    "initial_state",
    "pointwise_correlator",
    "ordered_correlator_batch",
    "smoothed_correlator",
    "equal_point_term",
    "full_correlator",
]

STATIONARY = "stationary"
MAX_SMOOTHED_ORDER = 4
IMAG_TOL = 1e-10


class CoincidenceError(ValueError):
    """Same detector probed twice at the same instant."""


def initial_state(model, rho0):
    """Resolve ``rho0`` (a matrix or :data:`STATIONARY`) to a density matrix."""
    if isinstance(rho0, str):
        if rho0 != STATIONARY:
            raise ValueError(f"unknown initial state token {rho0!r}")
        return stationary_state(model)
    rho = np.asarray(rho0, dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise ValueError(f"initial state has shape {rho.shape}, expected {(model.dim,) * 2}")
    return rho


def _is_stationary(rho0):
    return isinstance(rho0, str) and rho0 == STATIONARY


def _insertions(model):
    return model._memo("insertions", lambda: tuple(insertion(ch.c) for ch in model.channels))


def _trace_row(d):
    return vec(np.eye(d))


# --- pointwise --------------------------------------------------------------

def _ordered_value(model, dets, times, rho_vec, stationary):
    prop = propagator(model)
    C = _insertions(model)
    v = rho_vec if stationary else prop(times[0]) @ rho_vec
    for k, det in enumerate(dets):
        v = C[det] @ v
        if k + 1 < len(dets):
            v = prop(times[k + 1] - times[k]) @ v
    return _trace_row(model.dim) @ v


def pointwise_correlator(model, entries, rho0=STATIONARY):
    """Correlator of the white-noise signals at time points.

    Parameters
    ----------
    model : SystemModel
    entries : sequence of ``(detector, time)``
        Detectors by index or label; order is irrelevant (entries are sorted
        by time).
    rho0 : array or ``STATIONARY``
        State at time 0. With ``STATIONARY`` only time differences matter and
        negative times are allowed.

    Entries of *different* detectors at the same instant are averaged over
    their insertion orders. The same detector twice at one instant is a
    white-noise singularity and raises :class:`CoincidenceError`.
    """
    if len(entries) == 0:
        return 1.0
    dets = [model.channel_index(d) for d, _ in entries]
    times = [float(t) for _, t in entries]
    stationary = _is_stationary(rho0)
    if not stationary and min(times) < 0:
        raise ValueError("time points must be >= 0 for an explicit initial state")
    seen = set()
    for d, t in zip(dets, times):
        if (d, t) in seen:
            raise CoincidenceError(
                f"distributional coincidence: detector {model.labels[d]!r} twice at t={t}; "
                "use smoothed correlator"
            )
        seen.add((d, t))

    rho_vec = vec(initial_state(model, rho0))
    order = sorted(range(len(dets)), key=lambda i: times[i])
    groups = [list(g) for _, g in itertools.groupby(order, key=lambda i: times[i])]
    group_orders = [list(itertools.permutations(g)) for g in groups]

    total = 0.0
    count = 0
    for choice in itertools.product(*group_orders):
        seq = [i for grp in choice for i in grp]
        total = total + _ordered_value(model, [dets[i] for i in seq], [times[i] for i in seq],
                                       rho_vec, stationary)
        count += 1
    value = total / count / 2 ** len(dets)
    if abs(value.imag) > IMAG_TOL * max(1.0, abs(value.real)):
        raise ArithmeticError(f"correlator has imaginary residue {value.imag:.3g}")
    return float(value.real)


def ordered_correlator_batch(model, dets, times, rho0=STATIONARY):
    """Pointwise correlator for many ordered time tuples at once.

    ``times`` has shape ``(P, N)`` with non-decreasing rows; ``dets`` gives
    the detector of each column. No coincidence checks: this is the
    integrand kernel of the smoothed correlator.
    """
    times = np.asarray(times, dtype=float)
    P, N = times.shape
    dets = [model.channel_index(d) for d in dets]
    stationary = _is_stationary(rho0)
    rho_vec = vec(initial_state(model, rho0))
    prop = propagator(model)
    spec = prop.spectral
    C = _insertions(model)
    scale = 0.5 ** N
    if spec is None:
        out = np.empty(P)
        for p in range(P):
            out[p] = _ordered_value(model, dets, times[p], rho_vec, stationary).real
        return out * scale

    mu, V, Vinv = spec
    Ct = _eigen_insertions(model)
    w = np.broadcast_to(Vinv @ rho_vec, (P, mu.size))
    if not stationary:
        w = w * np.exp(np.outer(times[:, 0], mu))
    for k, det in enumerate(dets):
        w = w @ Ct[det]
        if k + 1 < N:
            w = w * np.exp(np.outer(times[:, k + 1] - times[:, k], mu))
    out = w @ (_trace_row(model.dim) @ V)
    return out.real * scale


def _eigen_insertions(model):
    def build():
        mu, V, Vinv = propagator(model).spectral
        # transposed so that row vectors can be right-multiplied
        return tuple((Vinv @ C @ V).T for C in _insertions(model))
    return model._memo("eigen_insertions", build)


# --- smoothed ---------------------------------------------------------------

@lru_cache(maxsize=None)
def _simplex_rule(r, q):
    """Nodes/weights for ``{0 <= x_1 <= ... <= x_r <= 1}`` (collapsed GL)."""
    x, w = gauss_legendre(q)
    grids = np.meshgrid(*([x] * r), indexing="ij")
    wgrids = np.meshgrid(*([w] * r), indexing="ij")
    v = [g.reshape(-1) for g in grids]
    weight = np.prod([g.reshape(-1) for g in wgrids], axis=0)
    pts = np.empty((v[0].size, r))
    cur = v[r - 1]
    pts[:, r - 1] = cur
    for k in range(r - 2, -1, -1):
        weight = weight * cur
        cur = cur * v[k]
        pts[:, k] = cur
    return pts, weight


_ORDER_BY_N = {1: 10, 2: 8, 3: 6, 4: 5}
MAX_NODES = 5 * 10**7
MAX_LEVEL = 7


def _nondecreasing_tuples(active):
    """Non-decreasing cell-index tuples with ``t[k]`` drawn from ``active[k]``."""
    out = []

    def rec(k, lo, prefix):
        if k == len(active):
            out.append(tuple(prefix))
            return
        for c in active[k]:
            if c >= lo:
                prefix.append(c)
                rec(k + 1, c, prefix)
                prefix.pop()

    rec(0, -1, [])
    return out


def _runs(tup):
    return tuple(len(list(g)) for _, g in itertools.groupby(tup))


def _simplex_integral(model, dets, filters, rho0, edges, q):
    """Sum over orderings of the ordered-simplex integral on a fixed cell grid."""
    N = len(dets)
    a = edges[:-1]
    h = np.diff(edges)
    mids = 0.5 * (a + edges[1:])
    total = 0.0
    n_nodes = 0
    for sigma in itertools.permutations(range(N)):
        fs = [filters[i] for i in sigma]
        ds = [dets[i] for i in sigma]
        active = []
        for f in fs:
            lo, hi = f.support
            active.append(np.nonzero((mids > lo) & (mids < hi))[0].tolist())
        tuples = _nondecreasing_tuples(active)
        by_pattern = {}
        for tup in tuples:
            by_pattern.setdefault(_runs(tup), []).append(tup)
        for pattern, tups in by_pattern.items():
            T = np.asarray(tups)                     # (M, N) cell indices
            rules = [_simplex_rule(r, q) for r in pattern]
            # tensor product of the per-run simplex rules
            X = rules[0][0]
            W = rules[0][1]
            for pts, wts in rules[1:]:
                X = np.concatenate([np.repeat(X, len(pts), axis=0),
                                    np.tile(pts, (len(X), 1))], axis=1)
                W = np.outer(W, wts).reshape(-1)
            Q = len(W)
            n_nodes += Q * len(T)
            if n_nodes > MAX_NODES:
                raise QuadratureError(f"smoothed correlator needs more than {MAX_NODES} nodes")
            chunk = max(1, 200_000 // Q)
            for s in range(0, len(T), chunk):
                Tc = T[s:s + chunk]
                lo = a[Tc]                            # (m, N)
                width = h[Tc]
                t = lo[:, None, :] + width[:, None, :] * X[None, :, :]
                jac = np.prod(width, axis=1)         # (m,)
                t2 = t.reshape(-1, N)
                fv = np.ones(len(t2))
                for k, f in enumerate(fs):
                    fv *= f(t2[:, k])
                nz = fv != 0.0
                if not np.any(nz):
                    continue
                vals = np.zeros(len(t2))
                vals[nz] = ordered_correlator_batch(model, ds, t2[nz], rho0)
                vals = (vals * fv).reshape(len(Tc), Q)
                total += float(np.sum((vals @ W) * jac))
    return total


def _base_edges(filters, lower):
    pts = set()
    for f in filters:
        lo, hi = f.support
        pts.update((max(lo, lower), hi))
        pts.update(p for p in f.breakpoints if lo <= p <= hi)
    pts = sorted(p for p in pts if p >= lower)
    return np.asarray(pts, dtype=float)


def _scale(f):
    if isinstance(f, ExponentialFilter):
        return 4.0 / f.lam
    lo, hi = f.support
    return (hi - lo) / 2.0


def _refined(edges, h):
    out = [edges[0]]
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = max(1, int(math.ceil((hi - lo) / h - 1e-9)))
        out.extend(lo + (hi - lo) * np.arange(1, n + 1) / n)
    return np.asarray(out)


def _clip(filters, lower):
    return [f for f in filters if f.support[1] > lower]


def _stationary_exponential_pair(model, dets, filters):
    """Closed-form K° for two exponential kernels in the stationary state."""
    spec = propagator(model).spectral
    if spec is None:
        return None
    mu, V, Vinv = spec
    C = _insertions(model)
    rho_vec = vec(stationary_state(model))
    row = _trace_row(model.dim)
    total = 0.0 + 0.0j
    for p, q in ((0, 1), (1, 0)):
        fp, fq = filters[p], filters[q]
        alpha = row @ C[dets[q]] @ V
        beta = Vinv @ (C[dets[p]] @ rho_vec)
        lp, lq = fp.lam, fq.lam
        kappa = lp * lq / (lp + lq)
        delta = fq.center - fp.center
        if delta > 0:
            b = mu + lq
            small = np.abs(b * delta) < 1e-8
            b_safe = np.where(small, 1.0, b)
            phi = np.where(small, delta * (1 + b * delta / 2), np.expm1(b_safe * delta) / b_safe)
            J = np.exp(-lq * delta) * phi + np.exp(mu * delta) / (lp - mu)
        else:
            J = np.exp(lp * delta) / (lp - mu)
        total += kappa * np.sum(alpha * beta * J)
    value = total / 4.0
    if abs(value.imag) > IMAG_TOL * max(1.0, abs(value.real)):
        raise ArithmeticError(f"correlator has imaginary residue {value.imag:.3g}")
    return float(value.real)


def smoothed_correlator(model, entries, rho0=STATIONARY, tol=1e-6, method="auto"):
    """Correlator of filtered signals without equal-point contributions (K°).

    Parameters
    ----------
    entries : sequence of ``(detector, TestFunction)``
    rho0 : array or ``STATIONARY``
        With an explicit state the signal starts at ``t = 0`` and filter
        supports are clipped there.
    tol : float
        Absolute tolerance of the adaptive quadrature.
    method : {"auto", "quadrature"}
        ``"auto"`` uses closed forms where available (stationary state with
        one kernel, or two exponential kernels).

    Orders above :data:`MAX_SMOOTHED_ORDER` are refused: the quadrature cost
    grows exponentially with the number of entries.
    """
    N = len(entries)
    if N == 0:
        return 1.0
    if N > MAX_SMOOTHED_ORDER:
        raise ValueError(
            f"smoothed correlators are limited to N <= {MAX_SMOOTHED_ORDER} "
            f"(requested N = {N}); quadrature cost grows exponentially"
        )
    dets = [model.channel_index(d) for d, _ in entries]
    filters = [f for _, f in entries]
    stationary = _is_stationary(rho0)
    lower = -np.inf if stationary else 0.0
    if len(_clip(filters, lower)) < N:
        return 0.0
    if any(not np.any(model.channels[d].c) for d in dets):
        return 0.0  # a vanishing insertion kills every ordering

    if method == "auto" and stationary:
        if N == 1:
            rho = stationary_state(model)
            c = model.channels[dets[0]].c
            mean = 0.5 * np.trace((c + c.conj().T) @ rho).real
            return float(filters[0].mass() * mean)
        if N == 2 and all(isinstance(f, ExponentialFilter) for f in filters):
            value = _stationary_exponential_pair(model, dets, filters)
            if value is not None:
                return value

    q = _ORDER_BY_N[N]
    base = _base_edges(filters, lower)
    h = min(_scale(f) for f in filters)
    prev = None
    for level in range(MAX_LEVEL + 1):
        edges = _refined(base, h / 2 ** level)
        value = _simplex_integral(model, dets, filters, rho0, edges, q)
        if prev is not None and abs(value - prev) < tol:
            return value
        prev = value
    raise QuadratureError(
        f"smoothed correlator did not reach tol {tol} after {MAX_LEVEL} refinements",
        value=value, error=abs(value - prev),
    )


# --- equal-point contractions -----------------------------------------------

def equal_point_term(model, entries, pairing, rho0=STATIONARY):
    """Product of white-noise contractions ``delta_ll' / (4 eta) * integral f f'``
    over the pairs of ``pairing`` (pairs of positions in ``entries``)."""
    lower = -np.inf if _is_stationary(rho0) else 0.0
    value = 1.0
    for p, pp in pairing:
        lp = model.channel_index(entries[p][0])
        if lp != model.channel_index(entries[pp][0]):
            return 0.0
        value *= overlap(entries[p][1], entries[pp][1], lower=lower) / (4.0 * model.channels[lp].eta)
        if value == 0.0:
            return 0.0
    return value


def full_correlator(model, entries, rho0=STATIONARY, tol=1e-6, method="auto"):
    """Correlator of filtered signals including equal-point contributions.

    Sum over every even subset of the entries and every pairing of that
    subset of the contraction product, times the smoothed correlator of the
    remaining entries (the empty remainder contributes 1).
    """
    N = len(entries)
    if N > MAX_SMOOTHED_ORDER:
        raise ValueError(
            f"smoothed correlators are limited to N <= {MAX_SMOOTHED_ORDER} "
            f"(requested N = {N}); quadrature cost grows exponentially"
        )
    entries = list(entries)
    smoothed = {}

    def k_smoothed(rest):
        if rest not in smoothed:
            smoothed[rest] = smoothed_correlator(model, [entries[i] for i in rest], rho0,
                                                 tol=tol, method=method)
        return smoothed[rest]

    total = k_smoothed(tuple(range(N)))
    for size in range(2, N + 1, 2):
        for subset in itertools.combinations(range(N), size):
            rest = tuple(i for i in range(N) if i not in subset)
            for pairing in pair_partitions(subset):
                c = equal_point_term(model, entries, pairing, rho0)
                if c != 0.0:
                    total += c * k_smoothed(rest)
    return total
