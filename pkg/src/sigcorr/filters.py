"""Test functions modelling the amplifier response, their overlap integrals,
and their application to recorded signal increments."""

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .densemath import quad

__all__ = [
    "TAIL_EFOLDS",
    "TestFunction",
    "ExponentialFilter",
    "BoxFilter",
    "TabulatedFilter",
    "overlap",
    "apply",
    "exponential_signal",
    "filter_from_dict",
    "filter_to_dict",
]

# e^{-28} ~ 7e-13: neglected tail mass of the exponential kernel
TAIL_EFOLDS = 28.0


class TestFunction:
    """Base class for filter kernels with a finite effective support."""

    __test__ = False  # not a pytest class
    kind = None

    def __call__(self, u):
        raise NotImplementedError

    @property
    def support(self):
        raise NotImplementedError

    @property
    def breakpoints(self):
        """Points where the kernel is not smooth."""
        return self.support

    def mass(self):
        lo, hi = self.support
        return quad(self, lo, hi, tol=1e-12, points=self.breakpoints)


@dataclass(frozen=True)
class ExponentialFilter(TestFunction):
    """First-order low-pass kernel ``f(u) = lam * exp(-lam (center - u))`` for
    ``u <= center`` and zero afterwards."""

    center: float
    lam: float
    kind = "exponential"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"bandwidth must be positive, got {self.lam}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        s = self.center - u
        out = np.where(s >= 0, self.lam * np.exp(-self.lam * np.maximum(s, 0.0)), 0.0)
        return out if out.ndim else float(out)

    @property
    def support(self):
        return (self.center - TAIL_EFOLDS / self.lam, self.center)

    @property
    def breakpoints(self):
        return (self.center,)

    def mass(self):
        return 1.0

    def shifted(self, dt):
        return ExponentialFilter(self.center + dt, self.lam)


@dataclass(frozen=True)
class BoxFilter(TestFunction):
    """Constant ``height`` on ``[a, b]``."""

    a: float
    b: float
    height: float = 1.0
    kind = "box"

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"box needs a < b, got [{self.a}, {self.b}]")

    @classmethod
    def centered(cls, t, width, mass=1.0):
        return cls(t - width / 2, t + width / 2, mass / width)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        out = np.where((u >= self.a) & (u <= self.b), self.height, 0.0)
        return out if out.ndim else float(out)

    @property
    def support(self):
        return (self.a, self.b)

    def mass(self):
        return self.height * (self.b - self.a)

    def shifted(self, dt):
        return BoxFilter(self.a + dt, self.b + dt, self.height)


@dataclass(frozen=True, eq=False)
class TabulatedFilter(TestFunction):
    """Piecewise-linear kernel through ``(grid, values)``; zero outside the grid."""

    grid: tuple
    values: tuple
    kind = "tabulated"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("tabulated filter needs matching 1-D grid and values (>= 2 points)")
        if np.any(np.diff(g) <= 0):
            raise ValueError("tabulated grid must be strictly increasing")
        object.__setattr__(self, "grid", tuple(g))
        object.__setattr__(self, "values", tuple(v))

    def __call__(self, u):
        out = np.interp(u, self.grid, self.values, left=0.0, right=0.0)
        return out if np.ndim(out) else float(out)

    @property
    def support(self):
        return (self.grid[0], self.grid[-1])

    @property
    def breakpoints(self):
        return self.grid

    def shifted(self, dt):
        return TabulatedFilter(tuple(np.add(self.grid, dt)), self.values)


def _overlap_exponential(f, g, lower):
    l1, l2 = f.lam, g.lam
    m = min(f.center, g.center)
    if m <= lower:
        return 0.0
    value = l1 * l2 / (l1 + l2) * math.exp(-l1 * (f.center - m) - l2 * (g.center - m))
    if np.isfinite(lower):
        value *= -math.expm1(-(l1 + l2) * (m - lower))
    return value


def overlap(f, g, lower=-np.inf, tol=1e-13):
    """``integral of f(u) g(u) du`` over ``u >= lower``.

    Closed forms for exponential/exponential and box/box pairs; adaptive
    quadrature over the common support otherwise.
    """
    if isinstance(f, ExponentialFilter) and isinstance(g, ExponentialFilter):
        return _overlap_exponential(f, g, lower)
    lo = max(f.support[0], g.support[0], lower)
    hi = min(f.support[1], g.support[1])
    if lo >= hi:
        return 0.0
    if isinstance(f, BoxFilter) and isinstance(g, BoxFilter):
        return f.height * g.height * (hi - lo)
    points = sorted({p for p in (*f.breakpoints, *g.breakpoints) if lo < p < hi})
    return quad(lambda u: f(u) * g(u), lo, hi, tol=tol, points=points)


def apply(f, dr, dt, t0=0.0, origin=None):
    """Discrete ``I(f) = integral f dr`` by the left-point (Ito) rule.

    ``dr[i]`` is the increment over ``[t0 + i dt, t0 + (i + 1) dt]``. The record
    must cover the support of ``f``; when ``origin`` is given the signal is
    taken not to exist before it and only ``[max(lo, origin), hi]`` must be
    covered.
    """
    dr = np.asarray(dr, dtype=float)
    n = dr.shape[0]
    lo, hi = f.support
    if origin is not None:
        lo = max(lo, origin)
    t_end = t0 + n * dt
    slack = 1e-9 * max(1.0, abs(t_end))
    if t0 > lo + slack or t_end < hi - slack:
        raise ValueError(
            f"record [{t0}, {t_end}] does not cover filter support [{lo}, {hi}]"
        )
    u = t0 + dt * np.arange(n)
    return float(f(u) @ dr)


def exponential_signal(lam, dr, dt, y0=0.0):
    """Running filtered signal ``y[i] = I(f^{u_i})`` for the exponential kernel.

    One-pass recursion ``y <- y exp(-lam dt) + lam dr``; identical to the
    left-point Riemann sum of :func:`apply` for ``f = ExponentialFilter(u_i, lam)``
    over the same increments. ``y0`` carries the state of a previous chunk.
    Works column-wise on 2-D input.
    """
    q = math.exp(-lam * dt)
    dr = np.asarray(dr, dtype=float)
    zi_shape = (1,) + dr.shape[1:]
    zi = np.broadcast_to(q * np.asarray(y0, dtype=float), zi_shape).astype(float)
    y, _ = scipy.signal.lfilter([lam], [1.0, -q], dr, axis=0, zi=zi)
    return y


def filter_from_dict(d):
    kind = d["kind"]
    if kind == "exponential":
        return ExponentialFilter(float(d["center"]), float(d["lam"]))
    if kind == "box":
        return BoxFilter(float(d["a"]), float(d["b"]), float(d.get("height", 1.0)))
    if kind == "tabulated":
        return TabulatedFilter(tuple(d["grid"]), tuple(d["values"]))
    raise ValueError(f"unknown filter kind {kind!r}")


def filter_to_dict(f):
    if isinstance(f, ExponentialFilter):
        return {"kind": "exponential", "center": f.center, "lam": f.lam}
    if isinstance(f, BoxFilter):
        return {"kind": "box", "a": f.a, "b": f.b, "height": f.height}
    if isinstance(f, TabulatedFilter):
        return {"kind": "tabulated", "grid": list(f.grid), "values": list(f.values)}
    raise TypeError(f"cannot serialize {type(f).__name__}")
