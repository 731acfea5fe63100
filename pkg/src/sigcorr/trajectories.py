"""Integration of the stochastic master equation (Euler-Maruyama, or a
positivity-preserving first-order Kraus scheme) and of its linear
(unnormalized) counterpart, with the measured signal increments.

Signal convention: ``dr_k = tr[(c_k + c_k^+) rho] dt / 2 + dW_k / (2 sqrt(eta_k))``.
Other references define the signal with a relative factor of 2.
"""

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import averaged_generator

__all__ = [
    "POSITIVITY_TOL",
    "SCHEMES",
    "PositivityError",
    "TraceError",
    "NoiseStream",
    "Trajectory",
    "validate_density",
    "simulate",
    "simulate_linear",
    "iter_signal_chunks",
    "write_trajectory_csv",
]

POSITIVITY_TOL = -1e-3
TRACE_BOUNDS = (1e-12, 1e12)
CHUNK = 1 << 17


class PositivityError(ArithmeticError):
    def __init__(self, step, seed):
        self.step = step
        self.seed = seed
        super().__init__(f"state lost positivity at step {step} (seed {seed}); reduce dt")


class TraceError(ArithmeticError):
    def __init__(self, step, seed):
        self.step = step
        self.seed = seed
        super().__init__(f"linear state trace left [{TRACE_BOUNDS[0]:g}, {TRACE_BOUNDS[1]:g}] "
                         f"at step {step} (seed {seed})")


class NoiseStream:
    """Independent, reproducible Gaussian increment streams, one per detector.

    ``seed`` may be an integer or a :class:`numpy.random.SeedSequence`. Drawing
    ``n`` then ``m`` steps gives the same numbers as drawing ``n + m`` at once.
    """

    def __init__(self, seed, n_detectors):
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.seed = seed if not isinstance(seed, np.random.SeedSequence) else (ss.entropy, ss.spawn_key)
        self._gens = [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(n_detectors)]

    def increments(self, n_steps, dt):
        out = np.empty((len(self._gens), n_steps))
        for k, g in enumerate(self._gens):
            g.standard_normal(n_steps, out=out[k])
        out *= math.sqrt(dt)
        return np.ascontiguousarray(out.T)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Result of one simulated run.

    ``dr[i, k]`` is detector ``k``'s increment over ``[i dt, (i + 1) dt]``.
    Snapshots are taken every ``snapshot_stride`` steps (times
    ``snapshot_times``). ``trace_weights`` holds ``tr[rho_lin]`` after every
    step in linear modes.
    """

    dt: float
    n_steps: int
    seed: object
    labels: tuple
    dr: np.ndarray
    final_state: np.ndarray
    snapshot_stride: int = 0
    snapshots: np.ndarray = None
    linear_snapshots: np.ndarray = None
    trace_weights: np.ndarray = None
    tracking_error: float = None
    mode: str = "nonlinear"
    extra: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps)

    @property
    def snapshot_times(self):
        if not self.snapshot_stride:
            return np.empty(0)
        return self.dt * self.snapshot_stride * np.arange(len(self.snapshots))

    @property
    def final_weight(self):
        return None if self.trace_weights is None else float(self.trace_weights[-1])


def validate_density(rho, d, tol=1e-9):
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (d, d):
        raise ValueError(f"state has shape {rho.shape}, expected {(d, d)}")
    if np.abs(rho - rho.conj().T).max() > tol:
        raise ValueError("initial state is not Hermitian")
    if abs(np.trace(rho).real - 1) > tol:
        raise ValueError("initial state does not have unit trace")
    if np.linalg.eigvalsh(rho).min() < -tol:
        raise ValueError("initial state is not positive semidefinite")
    return np.ascontiguousarray(rho)


# --- kernels ----------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _min_eig(rho):
    d = rho.shape[0]
    if d == 1:
        return rho[0, 0].real
    if d == 2:
        a = rho[0, 0].real
        b = rho[1, 1].real
        off = abs(rho[0, 1])
        return 0.5 * (a + b) - math.sqrt(0.25 * (a - b) ** 2 + off * off)
    return np.linalg.eigvalsh(rho)[0]


@numba.njit(cache=True, nogil=True)
def _drift(G, rho, out, dt):
    d = rho.shape[0]
    n = d * d
    for a in range(n):
        acc = 0j
        for b in range(n):
            acc += G[a, b] * rho[b // d, b % d]
        out[a // d, a % d] = rho[a // d, a % d] + dt * acc


@numba.njit(cache=True, nogil=True)
def _add_insertion(c, rho, coef, m, out):
    # out += coef * (c rho + rho c^+ - m rho)
    d = rho.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0j
            for l in range(d):
                acc += c[i, l] * rho[l, j] + rho[i, l] * np.conj(c[j, l])
            out[i, j] += coef * (acc - m * rho[i, j])


@numba.njit(cache=True, nogil=True)
def _expect(c, rho):
    # tr[(c + c^+) rho] = 2 Re tr[c rho]
    d = rho.shape[0]
    acc = 0j
    for i in range(d):
        for l in range(d):
            acc += c[i, l] * rho[l, i]
    return 2.0 * acc.real


@numba.njit(cache=True, nogil=True)
def _hermitize(src, dst, scale):
    d = src.shape[0]
    for i in range(d):
        for j in range(d):
            dst[i, j] = 0.5 * (src[i, j] + np.conj(src[j, i])) * scale


@numba.njit(cache=True, nogil=True)
def _trace(rho):
    acc = 0.0
    for i in range(rho.shape[0]):
        acc += rho[i, i].real
    return acc


@numba.njit(cache=True, nogil=True)
def _kraus_step(A, Ls, cs, sqeta, rho, m, dW, dt, out, tmp):
    # out = M rho M^+ + sum_j L_j rho L_j^+ dt, M = 1 + A dt + sum_k sqrt(eta_k) c_k dy_k
    d = rho.shape[0]
    n = cs.shape[0]
    for i in range(d):
        for j in range(d):
            acc = A[i, j] * dt
            if i == j:
                acc += 1.0
            for k in range(n):
                acc += sqeta[k] * cs[k, i, j] * (sqeta[k] * m[k] * dt + dW[k])
            tmp[i, j] = acc
    for i in range(d):
        for j in range(d):
            acc = 0j
            for a in range(d):
                for b in range(d):
                    acc += tmp[i, a] * rho[a, b] * np.conj(tmp[j, b])
            for q in range(Ls.shape[0]):
                for a in range(d):
                    for b in range(d):
                        acc += Ls[q, i, a] * rho[a, b] * np.conj(Ls[q, j, b]) * dt
            out[i, j] = acc


@numba.njit(cache=True, nogil=True)
def _nonlinear_kernel(rho, G, A, Ls, cs, sqeta, dW, dt, dr, snaps, stride, offset,
                      kraus, tol, min_ev):
    n = cs.shape[0]
    new = np.empty_like(rho)
    tmp = np.empty_like(rho)
    m = np.empty(n)
    for s in range(dW.shape[0]):
        g = offset + s
        if stride > 0 and g % stride == 0:
            snaps[g // stride] = rho
        for k in range(n):
            m[k] = _expect(cs[k], rho)
            dr[s, k] = 0.5 * m[k] * dt + dW[s, k] / (2.0 * sqeta[k])
        if kraus:
            _kraus_step(A, Ls, cs, sqeta, rho, m, dW[s], dt, new, tmp)
        else:
            _drift(G, rho, new, dt)
            for k in range(n):
                _add_insertion(cs[k], rho, sqeta[k] * dW[s, k], m[k], new)
        tr = _trace(new)
        if not (tr > 0.0 and tr < 1e300):
            return g
        _hermitize(new, rho, 1.0 / tr)
        ev = _min_eig(rho)
        if not ev == ev:
            return g
        if ev < min_ev[0]:
            min_ev[0] = ev
        if ev < tol:
            return g
    return -1


@numba.njit(cache=True, nogil=True)
def _coupled_kernel(rho, lin, G, cs, sqeta, dW, dt, dr, snaps, lsnaps, weights,
                    stride, offset, err, tol, min_ev):
    # nonlinear rho and linear rho_lin driven by the same physical signal
    d = rho.shape[0]
    n = cs.shape[0]
    new = np.empty_like(rho)
    lnew = np.empty_like(rho)
    m = np.empty(n)
    for s in range(dW.shape[0]):
        g = offset + s
        if stride > 0 and g % stride == 0:
            snaps[g // stride] = rho
            lsnaps[g // stride] = lin
        for k in range(n):
            m[k] = _expect(cs[k], rho)
            dr[s, k] = 0.5 * m[k] * dt + dW[s, k] / (2.0 * sqeta[k])
        _drift(G, rho, new, dt)
        _drift(G, lin, lnew, dt)
        for k in range(n):
            _add_insertion(cs[k], rho, sqeta[k] * dW[s, k], m[k], new)
            _add_insertion(cs[k], lin, 2.0 * sqeta[k] ** 2 * dr[s, k], 0.0, lnew)
        _hermitize(new, rho, 1.0 / _trace(new))
        _hermitize(lnew, lin, 1.0)
        tr = _trace(lin)
        weights[s] = tr
        ev = _min_eig(rho)
        if ev < min_ev[0]:
            min_ev[0] = ev
        if not ev >= tol:
            return g, 1
        if not (1e-12 < tr < 1e12):
            return g, 2
        worst = 0.0
        for i in range(d):
            for j in range(d):
                diff = abs(lin[i, j] / tr - rho[i, j])
                if diff > worst:
                    worst = diff
        if worst > err[0]:
            err[0] = worst
    return -1, 0


@numba.njit(cache=True, nogil=True)
def _wiener_kernel(lin, G, A, Ls, cs, sqeta, dxi, dt, dr, snaps, weights, stride, offset,
                   kraus):
    # linear SME driven by dr = dxi / (2 sqrt(eta)), dxi a standard Wiener increment
    n = cs.shape[0]
    lnew = np.empty_like(lin)
    tmp = np.empty_like(lin)
    zero = np.zeros(n)
    for s in range(dxi.shape[0]):
        g = offset + s
        if stride > 0 and g % stride == 0:
            snaps[g // stride] = lin
        for k in range(n):
            dr[s, k] = dxi[s, k] / (2.0 * sqeta[k])
        if kraus:
            _kraus_step(A, Ls, cs, sqeta, lin, zero, dxi[s], dt, lnew, tmp)
        else:
            _drift(G, lin, lnew, dt)
            for k in range(n):
                _add_insertion(cs[k], lin, 2.0 * sqeta[k] ** 2 * dr[s, k], 0.0, lnew)
        _hermitize(lnew, lin, 1.0)
        tr = _trace(lin)
        weights[s] = tr
        if not (1e-12 < tr < 1e12):
            return g
    return -1


# --- drivers ----------------------------------------------------------------

def _arrays(model):
    d = model.dim
    n = len(model.channels)
    G = np.ascontiguousarray(averaged_generator(model), dtype=complex)
    cs = np.zeros((n, d, d), complex)
    for k, ch in enumerate(model.channels):
        cs[k] = ch.c
    sqeta = np.sqrt(model.etas) if n else np.zeros(0)
    # Kraus-form pieces: M = 1 + A dt + ..., plus unread jumps
    A = -1j * np.asarray(model.hamiltonian, dtype=complex)
    jumps = [np.asarray(L, dtype=complex) for L in model.decay]
    jumps += [math.sqrt(1.0 - ch.eta) * ch.c for ch in model.channels if ch.eta < 1.0]
    for L in [*model.decay, *(ch.c for ch in model.channels)]:
        A = A - 0.5 * L.conj().T @ L
    Ls = np.zeros((len(jumps), d, d), complex)
    for q, L in enumerate(jumps):
        Ls[q] = L
    return G, np.ascontiguousarray(A), Ls, cs, sqeta


SCHEMES = ("euler", "kraus")


def _n_steps(dt, T):
    if not dt > 0:
        raise ValueError("dt must be positive")
    if T < dt * (1 - 1e-9):
        raise ValueError("T must be at least dt")
    return int(round(T / dt))


def _snapshot_buffer(n_steps, stride, d):
    if not stride:
        return np.zeros((0, d, d), complex)
    return np.zeros((n_steps // stride + 1, d, d), complex)


def _tol(positivity_tol):
    return -np.inf if positivity_tol is None else float(positivity_tol)


class _NonlinearRun:
    """Stateful chunked integrator shared by :func:`simulate` and the estimators."""

    def __init__(self, model, rho0, dt, seed, scheme="euler", positivity_tol=POSITIVITY_TOL):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        self.G, self.A, self.Ls, self.cs, self.sqeta = _arrays(model)
        self.rho = validate_density(rho0, model.dim).copy()
        self.noise = NoiseStream(seed, len(model.channels))
        self.dt = dt
        self.kraus = scheme == "kraus"
        self.tol = _tol(positivity_tol)
        self.min_ev = np.array([np.inf])
        self.done = 0

    def advance(self, m, dr=None, snaps=None, stride=0):
        dW = self.noise.increments(m, self.dt)
        if dr is None:
            dr = np.empty_like(dW)
        if snaps is None:
            snaps = np.zeros((0,) + self.rho.shape, complex)
        bad = _nonlinear_kernel(self.rho, self.G, self.A, self.Ls, self.cs, self.sqeta, dW,
                                self.dt, dr, snaps, stride, self.done, self.kraus, self.tol,
                                self.min_ev)
        if bad >= 0:
            raise PositivityError(bad, self.noise.seed)
        self.done += m
        return dr


def iter_signal_chunks(model, rho0, dt, n_steps, seed, chunk=CHUNK, scheme="euler",
                       positivity_tol=POSITIVITY_TOL):
    """Yield ``(dr_chunk, run)`` pieces of one long nonlinear trajectory.

    Memory stays bounded by ``chunk``; the increments are identical to those
    of :func:`simulate` with the same arguments. ``run.min_ev[0]`` holds the
    smallest state eigenvalue seen so far.
    """
    run = _NonlinearRun(model, rho0, dt, seed, scheme, positivity_tol)
    while run.done < n_steps:
        dr = run.advance(min(chunk, n_steps - run.done))
        yield dr, run


def simulate(model, rho0, dt, T, seed, snapshot_stride=0, scheme="euler",
             positivity_tol=POSITIVITY_TOL):
    """Nonlinear stochastic master equation with its measurement record.

    ``scheme="euler"`` adds ``(G rho) dt + sum_k sqrt(eta_k) H[c_k](rho) dW_k``
    with ``G`` the averaged generator, then Hermitizes and renormalizes.
    ``scheme="kraus"`` applies the first-order Kraus form
    ``M rho M^+ + sum_j L_j rho L_j^+ dt`` instead, which keeps the state
    positive. The increment ``dr_k`` always uses the pre-step state.

    The smallest eigenvalue met is stored as ``extra["min_eigenvalue"]``.
    Falling below ``positivity_tol`` aborts with :class:`PositivityError`;
    ``positivity_tol=None`` only monitors. Euler steps routinely leave the
    positive cone by more than ``1e-3`` when efficient measurement keeps the
    state close to pure; first and second signal moments are not affected,
    so the estimators run Euler in monitor-only mode.
    """
    n_steps = _n_steps(dt, T)
    run = _NonlinearRun(model, rho0, dt, seed, scheme, positivity_tol)
    dr = np.empty((n_steps, len(model.channels)))
    snaps = _snapshot_buffer(n_steps, snapshot_stride, model.dim)
    while run.done < n_steps:
        start = run.done
        m = min(CHUNK, n_steps - start)
        run.advance(m, dr[start:start + m], snaps, snapshot_stride)
    if snapshot_stride and n_steps % snapshot_stride == 0:
        snaps[-1] = run.rho
    return Trajectory(dt, n_steps, run.noise.seed, model.labels, dr, run.rho.copy(),
                      snapshot_stride, snaps if snapshot_stride else None,
                      mode=f"nonlinear-{scheme}",
                      extra={"min_eigenvalue": float(run.min_ev[0])})


def simulate_linear(model, rho0, dt, T, seed, mode="wiener-driven", snapshot_stride=0,
                    positivity_tol=None, scheme="euler"):
    """Linear stochastic master equation for the unnormalized state (Euler).

    ``mode="physical-noise"`` integrates the nonlinear equation alongside and
    feeds the linear one with the physical record; ``rho_lin / tr[rho_lin]``
    then tracks the nonlinear state (the largest entrywise deviation is
    ``tracking_error``). ``mode="wiener-driven"`` feeds it with
    ``dr = dxi / (2 sqrt(eta))``, ``xi`` standard Wiener processes, so that
    ``tr[rho_lin(T)]`` is the likelihood-ratio weight of the record.

    ``scheme="kraus"`` (wiener-driven mode only) replaces the Euler step by
    ``M rho M^+ + sum_j L_j rho L_j^+ dt`` with ``M = 1 + A dt + sum_k
    sqrt(eta_k) c_k dxi_k``; the state stays positive and the trace stays a
    martingale. Euler steps can drive the trace through zero when the
    measurement is efficient.

    A trace outside ``[1e-12, 1e12]`` aborts with :class:`TraceError`.
    ``positivity_tol`` applies to the nonlinear state in physical-noise mode.
    """
    if mode not in ("physical-noise", "wiener-driven"):
        raise ValueError(f"unknown mode {mode!r}")
    if scheme not in SCHEMES or (scheme == "kraus" and mode != "wiener-driven"):
        raise ValueError(f"scheme {scheme!r} is not available in {mode} mode")
    n_steps = _n_steps(dt, T)
    G, A, Ls, cs, sqeta = _arrays(model)
    rho = validate_density(rho0, model.dim).copy()
    lin = rho.copy()
    noise = NoiseStream(seed, len(model.channels))
    dr = np.empty((n_steps, len(model.channels)))
    weights = np.empty(n_steps)
    snaps = _snapshot_buffer(n_steps, snapshot_stride, model.dim)
    lsnaps = _snapshot_buffer(n_steps, snapshot_stride, model.dim)
    err = np.zeros(1)
    min_ev = np.array([np.inf])
    for start in range(0, n_steps, CHUNK):
        m = min(CHUNK, n_steps - start)
        dW = noise.increments(m, dt)
        sl = slice(start, start + m)
        if mode == "physical-noise":
            bad, why = _coupled_kernel(rho, lin, G, cs, sqeta, dW, dt, dr[sl], snaps, lsnaps,
                                       weights[sl], snapshot_stride, start, err,
                                       _tol(positivity_tol), min_ev)
            if bad >= 0:
                raise (PositivityError if why == 1 else TraceError)(bad, noise.seed)
        else:
            bad = _wiener_kernel(lin, G, A, Ls, cs, sqeta, dW, dt, dr[sl], lsnaps, weights[sl],
                                 snapshot_stride, start, scheme == "kraus")
            if bad >= 0:
                raise TraceError(bad, noise.seed)
    if snapshot_stride and n_steps % snapshot_stride == 0:
        snaps[-1] = rho
        lsnaps[-1] = lin
    physical = mode == "physical-noise"
    extra = {"nonlinear_final": rho.copy(), "min_eigenvalue": float(min_ev[0])} if physical else {}
    return Trajectory(
        dt, n_steps, noise.seed, model.labels, dr,
        final_state=lin.copy(),
        snapshot_stride=snapshot_stride,
        snapshots=snaps if (snapshot_stride and physical) else None,
        linear_snapshots=lsnaps if snapshot_stride else None,
        trace_weights=weights,
        tracking_error=float(err[0]) if physical else None,
        mode=mode if scheme == "euler" else f"{mode}-{scheme}",
        extra=extra,
    )


def write_trajectory_csv(traj, path, model_hash, snapshots_path=None, header_lines=()):
    """CSV with ``step, time, dr_<label>...``; header comments carry ``dt``,
    seed and model hash, then any ``header_lines``. Snapshots, if any, go to
    a sidecar CSV."""
    labels = [f"dr_{lab}" for lab in traj.labels]
    extra = "".join(f"# {line}\n" for line in header_lines)
    with open(path, "w") as fh:
        fh.write(f"# dt={traj.dt!r} n_steps={traj.n_steps} seed={traj.seed} "
                 f"model_hash={model_hash} mode={traj.mode}\n")
        fh.write(extra)
        fh.write(",".join(["step", "time", *labels]) + "\n")
        for i in range(traj.n_steps):
            row = ",".join(repr(float(x)) for x in traj.dr[i])
            fh.write(f"{i},{i * traj.dt!r},{row}\n")
    snaps = traj.snapshots if traj.snapshots is not None else traj.linear_snapshots
    if snapshots_path and snaps is not None:
        d = snaps.shape[1]
        cols = [f"rho_{i}{j}_{part}" for i in range(d) for j in range(d) for part in ("re", "im")]
        with open(snapshots_path, "w") as fh:
            fh.write(f"# dt={traj.dt!r} stride={traj.snapshot_stride} seed={traj.seed} "
                     f"model_hash={model_hash}\n")
            fh.write(extra)
            fh.write(",".join(["step", "time", *cols]) + "\n")
            for n, S in enumerate(snaps):
                vals = ",".join(repr(float(v)) for z in S.reshape(-1) for v in (z.real, z.imag))
                step = n * traj.snapshot_stride
                fh.write(f"{step},{step * traj.dt!r},{vals}\n")
