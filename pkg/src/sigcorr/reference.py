"""Closed-form results for a qubit monitored along ``sigma_x`` and ``sigma_-``.

The qubit has no Hamiltonian and two detectors, ``"x"`` with
``c = sqrt(gamma_x) sigma_x`` and ``"-"`` with ``c = sqrt(gamma_minus) sigma_-``,
where ``sigma_- = (sigma_x - i sigma_y)/2``.

Population convention
---------------------
``z0`` is the polarization along the decay axis: ``z0 = +1`` is the state
``sigma_-`` relaxes into. With the standard Pauli matrices (``sigma_z =
diag(1, -1)``) this is ``z0 = -tr[sigma_z rho(0)]``; :func:`initial_state`
builds the corresponding density matrix. The stationary value is
``z_ss = gamma_minus / (gamma_minus + 2 gamma_x)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .exact import STATIONARY, full_correlator
from .filters import ExponentialFilter
from .model import MeasurementChannel, SystemModel, stationary_state

__all__ = [
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "SIGMA_MINUS",
    "QubitExampleParams",
    "qubit_model",
    "initial_state",
    "decay_polarization",
    "stationary_polarization",
    "kxminus_closed",
    "kxminus_stationary_kernel",
    "kxminus_filtered",
    "kxx_filtered",
]

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = (SIGMA_X - 1j * SIGMA_Y) / 2


@dataclass(frozen=True)
class QubitExampleParams:
    gamma_x: float = 0.5
    gamma_minus: float = 1.0
    eta_x: float = 1.0
    eta_minus: float = 1.0
    z0: float = 1.0

    def __post_init__(self):
        if self.gamma_x < 0 or self.gamma_minus < 0:
            raise ValueError("rates must be non-negative")
        if not -1.0 <= self.z0 <= 1.0:
            raise ValueError(f"z0 = {self.z0} is not a valid polarization")

    @property
    def relaxation_rate(self):
        return self.gamma_minus + 2 * self.gamma_x


def qubit_model(params):
    return SystemModel(
        dim=2,
        channels=(
            MeasurementChannel("x", math.sqrt(params.gamma_x) * SIGMA_X, params.eta_x),
            MeasurementChannel("-", math.sqrt(params.gamma_minus) * SIGMA_MINUS, params.eta_minus),
        ),
    )


def initial_state(z0):
    """Diagonal qubit state with decay-axis polarization ``z0``."""
    return np.diag([(1 - z0) / 2, (1 + z0) / 2]).astype(complex)


def decay_polarization(rho):
    return float(-np.trace(SIGMA_Z @ rho).real)


def stationary_polarization(params):
    return params.gamma_minus / params.relaxation_rate


def kxminus_closed(params, t1, t2):
    """``E[I_x(t1) I_-(t2)]`` in closed form.

    The ``t1 > t2`` branch depends on the state at the earlier probe time
    ``t2``, through ``exp(-(gamma_minus + 2 gamma_x) t2)``. The function is
    discontinuous on the diagonal, where it is undefined.
    """
    if t1 < 0 or t2 < 0:
        raise ValueError("times must be >= 0")
    if t1 == t2:
        raise ValueError("discontinuity point t1 == t2: the value depends on the regularization")
    gm, gx = params.gamma_minus, params.gamma_x
    pre = math.sqrt(gm * gx) / 2 * math.exp(-gm * abs(t2 - t1) / 2)
    if t2 > t1:
        return pre
    rate = params.relaxation_rate
    return pre * (2 * gx / rate - (params.z0 - gm / rate) * math.exp(-rate * t2))


def kxminus_stationary_kernel(params, delta):
    """Stationary ``K_{x,-}`` as a function of ``delta = t2 - t1`` (delta != 0)."""
    gm, gx = params.gamma_minus, params.gamma_x
    pre = math.sqrt(gm * gx) / 2 * math.exp(-gm * abs(delta) / 2)
    return pre if delta > 0 else pre * 2 * gx / params.relaxation_rate


def _exp_piece(beta, lo, hi):
    """integral_lo^hi exp(beta u) du, with infinite ends allowed."""
    if lo >= hi:
        return 0.0
    if math.isinf(hi):
        return -math.exp(beta * lo) / beta
    if math.isinf(lo):
        return math.exp(beta * hi) / beta
    if beta == 0.0:
        return hi - lo
    return math.exp(beta * lo) * math.expm1(beta * (hi - lo)) / beta


def kxminus_filtered(params, tau, lam, z_ss=None):
    """Stationary ``K_{x,-}(f^tau, f^0)`` for exponential kernels of bandwidth ``lam``.

    The difference of two independent exponential delays is Laplace
    distributed, so the double integral collapses to
    ``integral (lam/2) exp(-lam |u|) K(u - tau) du`` with ``K`` the stationary
    kernel; each piece is an elementary exponential integral.

    ``z_ss`` defaults to the stationary polarization computed numerically
    from the model's null space.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    if z_ss is None:
        z_ss = decay_polarization(stationary_state(qubit_model(params)))
    gm, gx = params.gamma_minus, params.gamma_x
    a = math.sqrt(gm * gx) / 2
    # stationary branch of the closed form: t1 > t2 carries 1 - z_ss = 2 gx / rate
    after = a * (1 - z_ss)
    # kernel in u (= t2 - t1 + ... shifted): K(u - tau) with u - tau > 0 -> a e^{-gm (u-tau)/2}
    total = 0.0
    cuts = sorted({0.0, tau})
    bounds = [-math.inf, *cuts, math.inf]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo >= hi:
            continue
        mid = 0.5 * (lo + hi) if not (math.isinf(lo) or math.isinf(hi)) else (hi - 1 if math.isinf(lo) else lo + 1)
        s_lap = -1.0 if mid > 0 else 1.0           # exp(-lam|u|) = exp(s_lap lam u)
        if mid - tau > 0:
            coef, s_k = a, -1.0                     # a exp(-gm (u - tau)/2)
        else:
            coef, s_k = after, 1.0                  # after exp(+gm (u - tau)/2)
        beta = s_lap * lam + s_k * gm / 2
        total += coef * math.exp(-s_k * gm * tau / 2) * _exp_piece(beta, lo, hi)
    return lam / 2 * total


def kxx_filtered(params, tau, lam, tol=1e-9):
    """Stationary ``K_{x,x}(f^tau, f^0)`` evaluated by the exact engine.

    Includes the equal-point contraction ``lam exp(-lam |tau|) / (8 eta_x)``.
    """
    model = qubit_model(params)
    entries = [("x", ExponentialFilter(tau, lam)), ("x", ExponentialFilter(0.0, lam))]
    return full_correlator(model, entries, STATIONARY, tol=tol)
