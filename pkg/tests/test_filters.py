import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sigcorr.densemath import quad
from sigcorr.filters import (
    TAIL_EFOLDS,
    BoxFilter,
    ExponentialFilter,
    TabulatedFilter,
    apply,
    exponential_signal,
    filter_from_dict,
    filter_to_dict,
    overlap,
)
from sigcorr.model import MeasurementChannel, SystemModel
from sigcorr.trajectories import simulate


def test_exponential_kernel_shape():
    f = ExponentialFilter(1.0, 4.0)
    assert f(1.0) == 4.0
    assert f(1.0 + 1e-12) == 0.0
    assert f(0.5) == pytest.approx(4 * math.exp(-2))
    lo, hi = f.support
    assert hi == 1.0 and lo == pytest.approx(1.0 - TAIL_EFOLDS / 4)
    assert quad(f, lo, hi, tol=1e-13) == pytest.approx(1.0, abs=1e-11)
    with pytest.raises(ValueError):
        ExponentialFilter(0.0, 0.0)


def test_box_and_tabulated():
    b = BoxFilter.centered(2.0, 0.5, mass=3.0)
    assert b.mass() == pytest.approx(3.0)
    assert b(2.2) == pytest.approx(6.0) and b(2.3) == 0.0
    t = TabulatedFilter((0.0, 1.0, 2.0), (0.0, 2.0, 0.0))
    assert t(0.5) == pytest.approx(1.0) and t(-1) == 0.0 and t(3) == 0.0
    assert t.mass() == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        TabulatedFilter((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        BoxFilter(1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 20), st.floats(0.5, 20),
       st.sampled_from([-np.inf, -0.5, 0.0]))
def test_exponential_overlap_closed_form_matches_quadrature(c1, c2, l1, l2, lower):
    f, g = ExponentialFilter(c1, l1), ExponentialFilter(c2, l2)
    lo = max(f.support[0], g.support[0], lower)
    hi = min(c1, c2)
    ref = quad(lambda u: f(u) * g(u), lo, hi, tol=1e-13) if lo < hi else 0.0
    assert overlap(f, g, lower) == pytest.approx(ref, abs=1e-10)


def test_overlap_of_equal_exponentials_is_half_lambda():
    f = ExponentialFilter(0.0, 10.0)
    assert overlap(f, f) == pytest.approx(5.0)
    assert overlap(ExponentialFilter(0.7, 10.0), f) == pytest.approx(5 * math.exp(-7))


def test_box_and_mixed_overlaps():
    assert overlap(BoxFilter(0, 2, 2.0), BoxFilter(1, 3, 0.5)) == pytest.approx(1.0)
    f, b = ExponentialFilter(1.0, 2.0), BoxFilter(0.0, 0.5)
    # integral over [0, 0.5] of 2 exp(-2 (1 - u))
    assert overlap(f, b) == pytest.approx(math.exp(-1) - math.exp(-2), abs=1e-12)


def test_apply_is_left_point_sum():
    rng = np.random.default_rng(0)
    dt = 0.01
    dr = rng.normal(size=500)
    f = BoxFilter(1.0, 2.0)
    u = dt * np.arange(500)
    assert apply(f, dr, dt) == pytest.approx(np.sum(f(u) * dr))
    with pytest.raises(ValueError):
        apply(f, dr[:150], dt)
    g = ExponentialFilter(0.5, 10.0)
    with pytest.raises(ValueError):
        apply(g, dr, dt)
    assert apply(g, dr, dt, origin=0.0) == pytest.approx(np.sum(g(u) * dr))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(1.0, 30.0), st.integers(1, 299))
def test_exponential_signal_matches_apply(seed, lam, split):
    dt = 1e-2
    dr = np.random.default_rng(seed).normal(size=300) * 0.1
    y = exponential_signal(lam, dr, dt)
    for i in (0, 17, 299):
        f = ExponentialFilter(i * dt, lam)
        assert y[i] == pytest.approx(apply(f, dr, dt, origin=0.0), rel=1e-10, abs=1e-13)
    first = exponential_signal(lam, dr[:split], dt)
    rest = exponential_signal(lam, dr[split:], dt, y0=first[-1])
    assert np.allclose(np.concatenate([first, rest]), y, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("eta", [1.0, 0.5])
def test_filtered_white_noise_variance(eta):
    # c = 0: dr is white noise of intensity 1/(4 eta), so Var I(f) = overlap(f, f)/(4 eta)
    lam, dt = 10.0, 1e-3
    model = SystemModel(dim=2, channels=(MeasurementChannel("w", np.zeros((2, 2)), eta),))
    traj = simulate(model, np.eye(2) / 2, dt, 4000.0, seed=7)
    y = exponential_signal(lam, traj.dr[:, 0], dt)
    stride = int(TAIL_EFOLDS / lam / dt)
    samples = y[stride::stride]
    n = samples.size
    var = np.mean(samples**2)
    se = np.std(samples**2, ddof=1) / math.sqrt(n)
    target = lam / (8 * eta)
    assert abs(var - target) < 4 * se


def test_filter_dict_round_trip():
    for f in (ExponentialFilter(0.3, 7.0), BoxFilter(0.0, 1.0, 2.0),
              TabulatedFilter((0.0, 1.0), (1.0, 0.0))):
        g = filter_from_dict(filter_to_dict(f))
        assert type(g) is type(f)
        assert filter_to_dict(g) == filter_to_dict(f)
    with pytest.raises(ValueError):
        filter_from_dict({"kind": "gaussian"})
