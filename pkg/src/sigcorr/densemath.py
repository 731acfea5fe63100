"""Dense numerical substrate: matrix exponential, vectorization, quadrature
and pair partitions.

Vectorization convention
------------------------
Operators are vectorized by **row stacking**, which is what ``numpy.ravel``
does for C-ordered arrays::

    vec(A)[i*d + j] = A[i, j]

Under this convention ``vec(X @ rho @ Y) == kron(X, Y.T) @ vec(rho)``; every
superoperator builder in the package relies on that identity.
"""

import heapq
import math

import numpy as np
import scipy.linalg

__all__ = [
    "QuadratureError",
    "expm",
    "kron",
    "vec",
    "unvec",
    "left",
    "right",
    "sandwich",
    "quad",
    "gauss_legendre",
    "pair_partitions",
    "pairings",
    "double_factorial",
]


class QuadratureError(RuntimeError):
    """Adaptive quadrature ran out of refinement budget.

    The best estimate and its error estimate are kept on the exception so the
    caller can decide what to do with them.
    """

    def __init__(self, message, value=None, error=None):
        super().__init__(message)
        self.value = value
        self.error = error


def _as_square(M, name="matrix"):
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    return M


def expm(M, t=1.0):
    """Return ``exp(t * M)``.

    Uses Padé scaling-and-squaring (Al-Mohy & Higham). Overflow is reported
    as :class:`OverflowError` instead of returning non-finite entries.
    """
    M = _as_square(M)
    A = np.asarray(M, dtype=complex) * t
    if not np.all(np.isfinite(A)):
        raise ValueError("expm argument has non-finite entries")
    with np.errstate(over="raise", invalid="raise"):
        try:
            E = scipy.linalg.expm(A)
        except FloatingPointError as exc:
            raise OverflowError(
                f"expm overflow for ||tM||_1 = {np.abs(A).sum(axis=0).max():.3g}"
            ) from exc
    if not np.all(np.isfinite(E)):
        raise OverflowError(
            f"expm overflow for ||tM||_1 = {np.abs(A).sum(axis=0).max():.3g}"
        )
    return E


def kron(A, B):
    """Kronecker product; thin wrapper kept for a uniform import surface."""
    return np.kron(np.asarray(A), np.asarray(B))


def vec(A):
    """Row-stacked vectorization of a square operator."""
    A = _as_square(A, "operator")
    return np.ascontiguousarray(A).reshape(-1)


def unvec(v, d=None):
    """Inverse of :func:`vec`. ``d`` is inferred from ``len(v)`` if omitted."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    if d is None:
        d = math.isqrt(v.size)
    if d * d != v.size:
        raise ValueError(f"vector of length {v.size} is not a vectorized {d}x{d} operator")
    return v.reshape(d, d)


def left(A):
    """Superoperator of ``rho -> A @ rho``."""
    A = _as_square(A)
    return np.kron(A, np.eye(A.shape[0]))


def right(B):
    """Superoperator of ``rho -> rho @ B``."""
    B = _as_square(B)
    return np.kron(np.eye(B.shape[0]), B.T)


def sandwich(X, Y):
    """Superoperator of ``rho -> X @ rho @ Y``."""
    X = _as_square(X)
    Y = _as_square(Y)
    if X.shape != Y.shape:
        raise ValueError(f"dimension mismatch: {X.shape} vs {Y.shape}")
    return np.kron(X, Y.T)


# --- quadrature -------------------------------------------------------------

# Gauss-Kronrod 7/15 nodes on [-1, 1] (QUADPACK qk15).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], _WGK[::-1]])
_GAUSS_W = np.zeros(15)
# Gauss points are the odd-indexed Kronrod nodes (1, 3, 5, 7 from the end).
_GAUSS_W[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


def _gk15(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    y = np.asarray(f(mid + half * _NODES), dtype=float)
    if y.shape != _NODES.shape:
        y = np.broadcast_to(y, _NODES.shape)
    k = half * (_KRONROD_W @ y)
    g = half * (_GAUSS_W @ y)
    if not (np.isfinite(k) and np.isfinite(g)):
        raise ValueError(f"integrand is not finite on [{a}, {b}]")
    return k, abs(k - g)


def quad(f, a, b, tol=1e-10, *, points=(), max_panels=10**6, vectorized=True,
         full_output=False):
    """Adaptive Gauss-Kronrod integral of a real function over ``[a, b]``.

    Panels with the largest error estimate are bisected until the summed
    estimate drops below ``tol``. The error estimate is ``|K15 - G7|`` per
    panel, which is deliberately pessimistic for smooth integrands.

    Parameters
    ----------
    f : callable
        Integrand. With ``vectorized=True`` it is called on arrays of nodes.
    a, b : float
        Finite integration limits, ``a <= b``.
    tol : float
        Absolute error target.
    points : sequence of float
        Known break points (jumps, kinks) inside ``(a, b)``; they become
        initial panel edges.
    max_panels : int
        Refinement budget. Exceeding it raises :class:`QuadratureError`.

    Returns
    -------
    float, or ``(value, error_estimate)`` with ``full_output=True``.
    """
    if not (np.isfinite(a) and np.isfinite(b)):
        raise ValueError("quad needs finite limits; truncate the domain first")
    if a > b:
        raise ValueError(f"quad needs a <= b, got a={a}, b={b}")
    if a == b:
        return (0.0, 0.0) if full_output else 0.0
    if not vectorized:
        scalar = f
        f = lambda x: np.array([scalar(float(xi)) for xi in x])

    edges = sorted({a, b, *(p for p in points if a < p < b)})
    heap = []
    total = 0.0
    err = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e = _gk15(f, lo, hi)
        total += v
        err += e
        heapq.heappush(heap, (-e, lo, hi, v))
    n_panels = len(heap)

    while err > tol:
        if n_panels >= max_panels:
            raise QuadratureError(
                f"quad did not converge within {max_panels} panels "
                f"(estimated error {err:.3g} > tol {tol:.3g})",
                value=total, error=err,
            )
        neg_e, lo, hi, v = heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            raise QuadratureError(
                f"quad panel [{lo}, {hi}] cannot be bisected further "
                f"(estimated error {err:.3g})", value=total, error=err,
            )
        v1, e1 = _gk15(f, lo, mid)
        v2, e2 = _gk15(f, mid, hi)
        total += v1 + v2 - v
        err += e1 + e2 + neg_e
        heapq.heappush(heap, (-e1, lo, mid, v1))
        heapq.heappush(heap, (-e2, mid, hi, v2))
        n_panels += 1
        if err < 0.0:
            # running sum drift; recompute from the heap
            err = -sum(item[0] for item in heap)

    # the incremental sum drifts; return the exact panel sum
    total = math.fsum(item[3] for item in heap)
    return (total, err) if full_output else total


def gauss_legendre(n, a=0.0, b=1.0):
    """Gauss-Legendre nodes and weights of order ``n`` on ``[a, b]``."""
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


# --- pairings ---------------------------------------------------------------

def pair_partitions(items):
    """Yield every partition of ``items`` into unordered pairs.

    Each partition is a tuple of 2-tuples; the first element of every pair
    precedes the second in the input order. An empty input yields one empty
    partition; an odd-sized input yields nothing.
    """
    items = list(items)
    if not items:
        yield ()
        return
    if len(items) % 2:
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        remaining = rest[:i] + rest[i + 1:]
        for tail in pair_partitions(remaining):
            yield ((first, partner),) + tail


def pairings(m):
    """All perfect pairings of the indices ``0, ..., 2m-1``.

    There are ``(2m - 1)!!`` of them; ``m = 0`` gives the single empty pairing.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    return list(pair_partitions(range(2 * m)))


def double_factorial(n):
    """``n!!`` with the convention ``(-1)!! = 0!! = 1``."""
    if n < -1:
        raise ValueError("n must be >= -1")
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out
