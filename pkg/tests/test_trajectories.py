import math

import numpy as np
import pytest

from sigcorr.densemath import vec
from sigcorr.estimators import importance_sampling_estimate
from sigcorr.exact import smoothed_correlator
from sigcorr.filters import BoxFilter
from sigcorr.model import MeasurementChannel, SystemModel, propagator
from sigcorr.reference import QubitExampleParams, initial_state, qubit_model
from sigcorr.trajectories import (
    NoiseStream,
    PositivityError,
    iter_signal_chunks,
    simulate,
    simulate_linear,
    write_trajectory_csv,
)

PLUS = np.full((2, 2), 0.5, dtype=complex)


def half_efficiency_qubit():
    return qubit_model(QubitExampleParams(eta_x=0.5, eta_minus=0.5))


def test_noise_stream_is_reproducible_and_chunkable():
    a = NoiseStream(3, 2).increments(1000, 0.01)
    s = NoiseStream(3, 2)
    b = np.vstack([s.increments(300, 0.01), s.increments(700, 0.01)])
    assert np.array_equal(a, b)
    assert a.shape == (1000, 2)
    assert not np.array_equal(a, NoiseStream(4, 2).increments(1000, 0.01))
    big = NoiseStream(1, 2).increments(200_000, 1.0)
    assert abs(np.corrcoef(big.T)[0, 1]) < 4 / math.sqrt(200_000)
    assert np.var(big[:, 0]) == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("eta", [1.0, 0.3])
def test_zero_measurement_gives_scaled_white_noise(eta):
    m = SystemModel(dim=2, channels=(MeasurementChannel("w", np.zeros((2, 2)), eta),))
    rho0 = np.diag([0.3, 0.7]).astype(complex)
    dt = 1e-3
    tr = simulate(m, rho0, dt, 100.0, seed=5, snapshot_stride=10_000)
    assert np.allclose(tr.snapshots, rho0, atol=1e-15)
    x = tr.dr[:, 0]
    assert tr.n_steps == 100_000 == x.size
    var, target = np.mean(x**2), dt / (4 * eta)
    se = np.std(x**2, ddof=1) / math.sqrt(x.size)
    assert abs(var - target) < 4 * se


def test_same_seed_is_bit_identical(qubit):
    a = simulate(qubit, initial_state(1.0), 1e-3, 2.0, seed=9, snapshot_stride=100,
                 positivity_tol=None)
    b = simulate(qubit, initial_state(1.0), 1e-3, 2.0, seed=9, snapshot_stride=100,
                 positivity_tol=None)
    assert np.array_equal(a.dr, b.dr) and np.array_equal(a.snapshots, b.snapshots)
    c = simulate(qubit, initial_state(1.0), 1e-3, 2.0, seed=10, positivity_tol=None)
    assert not np.array_equal(a.dr, c.dr)


def test_chunked_signal_equals_full_run(qubit):
    full = simulate(qubit, PLUS, 1e-3, 3.0, seed=2, scheme="kraus")
    parts = [dr.copy() for dr, _ in iter_signal_chunks(qubit, PLUS, 1e-3, 3000, 2, chunk=700,
                                                       scheme="kraus")]
    assert np.array_equal(np.vstack(parts), full.dr)


@pytest.mark.parametrize("scheme", ["euler", "kraus"])
def test_snapshots_are_normalized_hermitian(qubit, scheme):
    tr = simulate(qubit, PLUS, 1e-3, 5.0, seed=1, snapshot_stride=50, scheme=scheme,
                  positivity_tol=None)
    S = tr.snapshots
    assert len(S) == len(tr.snapshot_times) == 101
    assert np.abs(np.trace(S, axis1=1, axis2=2) - 1).max() < 1e-9
    assert np.abs(S - S.conj().transpose(0, 2, 1)).max() < 1e-12


def test_kraus_step_stays_positive(qubit):
    tr = simulate(qubit, initial_state(1.0), 1e-3, 50.0, seed=3, scheme="kraus")
    assert tr.extra["min_eigenvalue"] > -1e-10


def test_euler_positivity_abort_reports_step_and_seed(qubit):
    # naive Euler leaves the positive cone quickly at unit efficiency
    with pytest.raises(PositivityError) as info:
        simulate(qubit, initial_state(1.0), 1e-3, 50.0, seed=1)
    assert info.value.seed == 1 and info.value.step >= 0
    monitored = simulate(qubit, initial_state(1.0), 1e-3, 50.0, seed=1, positivity_tol=None)
    assert monitored.extra["min_eigenvalue"] < -1e-3


def test_rejects_bad_inputs(qubit):
    with pytest.raises(ValueError):
        simulate(qubit, np.diag([0.7, 0.7]), 1e-3, 1.0, seed=0)
    with pytest.raises(ValueError):
        simulate(qubit, np.array([[1.2, 0], [0, -0.2]]), 1e-3, 1.0, seed=0)
    with pytest.raises(ValueError):
        simulate(qubit, PLUS, 1e-3, 1e-4, seed=0)
    with pytest.raises(ValueError):
        simulate(qubit, PLUS, 1e-3, 1.0, seed=0, scheme="milstein")


def test_ensemble_signal_mean_and_state_mean():
    m = half_efficiency_qubit()
    dt, T, M = 1e-3, 1.0, 10_000
    window = BoxFilter(0.5, 0.6)
    sums, finals = np.empty(M), np.empty((M, 2, 2), complex)
    for i, child in enumerate(np.random.SeedSequence(21).spawn(M)):
        tr = simulate(m, PLUS, dt, T, child, positivity_tol=None)
        sums[i] = tr.dr[500:600, 0].sum()
        finals[i] = tr.final_state
    # signal: integral of (1/2) tr[(c + c^+) rho_t] over the window
    ref = smoothed_correlator(m, [("x", window)], PLUS, tol=1e-12)
    assert abs(sums.mean() - ref) < 4 * sums.std(ddof=1) / math.sqrt(M)
    # state: Lindblad evolution of the mean, componentwise
    target = (propagator(m, T) @ vec(PLUS)).reshape(2, 2)
    mean, se = finals.mean(axis=0), finals.std(axis=0, ddof=1) / math.sqrt(M)
    for part in (np.real, np.imag):
        ok = np.abs(part(mean) - part(target)) <= 4 * part(se) + 1e-12
        assert ok.all()


def test_linear_tracks_nonlinear_with_physical_noise():
    m = half_efficiency_qubit()
    tr = simulate_linear(m, initial_state(1.0), 1e-3, 5.0, seed=4, mode="physical-noise",
                         snapshot_stride=100)
    S, L = tr.snapshots, tr.linear_snapshots
    normed = L / np.trace(L, axis1=1, axis2=2)[:, None, None]
    assert np.abs(normed - S).max() <= tr.tracking_error + 1e-15
    assert tr.tracking_error < 0.1
    assert tr.trace_weights.size == tr.n_steps


def _tracking(dt, seeds=range(12)):
    m = half_efficiency_qubit()
    return np.mean([simulate_linear(m, initial_state(1.0), dt, 5.0, s, mode="physical-noise",
                                    positivity_tol=None).tracking_error for s in seeds])


def test_tracking_error_shrinks_like_sqrt_dt():
    # the Euler steps of the two equations differ by O(dW^2 - dt) per step,
    # which accumulates to O(sqrt(dt)) along a path
    errs = [_tracking(dt) for dt in (4e-3, 1e-3, 2.5e-4)]
    slope = np.polyfit(np.log([4e-3, 1e-3, 2.5e-4]), np.log(errs), 1)[0]
    assert 0.3 < slope < 0.7


@pytest.mark.xfail(strict=True, reason="Euler tracking discrepancy is O(sqrt(dt)), not O(dt)")
def test_tracking_error_below_five_dt():
    assert _tracking(1e-3, seeds=[4]) < 5e-3


@pytest.mark.parametrize("model_fn,scheme", [(half_efficiency_qubit, "euler"),
                                             (lambda: qubit_model(QubitExampleParams()), "kraus")])
def test_trace_weight_is_a_martingale(model_fn, scheme):
    m = model_fn()
    M = 10_000
    w = np.array([simulate_linear(m, PLUS, 1e-3, 1.0, child, scheme=scheme).final_weight
                  for child in np.random.SeedSequence(8).spawn(M)])
    assert abs(w.mean() - 1) < 4 * w.std(ddof=1) / math.sqrt(M)


def test_trace_is_constant_without_measurement():
    H = np.array([[0.0, 0.3], [0.3, 1.0]])
    m = SystemModel(dim=2, hamiltonian=H, decay=(0.5 * np.array([[0, 1], [0, 0]]),),
                    channels=(MeasurementChannel("w", np.zeros((2, 2)), 0.4),))
    tr = simulate_linear(m, PLUS, 1e-3, 3.0, seed=0)
    assert np.abs(tr.trace_weights - 1).max() < 1e-12


def test_importance_sampling_single_point():
    m = half_efficiency_qubit()
    f = BoxFilter(0.2, 0.8)
    est = importance_sampling_estimate(m, [("x", f)], 10_000, 1e-3, seed=6, rho0=PLUS,
                                       scheme="euler")
    ref = smoothed_correlator(m, [("x", f)], PLUS, tol=1e-12)
    assert abs(est.value - ref) < 4 * est.stderr


def test_trajectory_csv(tmp_path, qubit):
    tr = simulate(qubit, PLUS, 1e-2, 0.5, seed=1, snapshot_stride=10, scheme="kraus")
    path, side = tmp_path / "t.csv", tmp_path / "s.csv"
    write_trajectory_csv(tr, path, "abc123", side, header_lines=["note=1"])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# dt=0.01 n_steps=50 seed=1 model_hash=abc123")
    assert lines[1] == "# note=1"
    assert lines[2] == "step,time,dr_x,dr_-"
    assert len(lines) == 3 + 50
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=3)
    assert np.array_equal(data[:, 2:], tr.dr)
    snap = side.read_text().splitlines()
    assert len(snap) == 3 + 6 and snap[2].startswith("step,time,rho_00_re,rho_00_im")
