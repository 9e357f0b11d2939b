import math

import numpy as np
import pytest
from scipy import stats

from samle.bridge import (
    BridgeFrame,
    DegenerateInputError,
    IterationCapError,
    RaggedLayout,
    _minimum,
    _split,
    am_batch,
    am_pointwise,
    bb_discrete,
    chi_kernel,
    chi_ragged,
    chi_values,
    ea_batch,
    ea_bridge_sampler,
    guard_tau,
    mixed_products,
    sample_minimum,
    sample_tau,
    split_at_minimum,
)
from samle.rng import StreamKey
from samle.validation import ks_critical


def test_minimum_example():
    f = BridgeFrame(0.0, 0.0, 1.0)
    m = sample_minimum(f, 2.0)
    assert m == pytest.approx(-1.0, abs=1e-15)
    assert (f.x - m) * (f.y - m) == pytest.approx(1.0)


def test_minimum_collapses_as_E_vanishes():
    f = BridgeFrame(0.2, 1.5, 2.0)
    assert sample_minimum(f, 1e-14) == pytest.approx(0.2, abs=1e-12)
    assert sample_minimum(f, 1e-14) < 0.2


def test_minimum_rejects_nonpositive_E():
    with pytest.raises(DegenerateInputError):
        sample_minimum(BridgeFrame(0.0, 0.0, 1.0), 0.0)
    with pytest.raises(DegenerateInputError):
        split_at_minimum(BridgeFrame(0.0, 0.0, 1.0), -1.0, 0.3)


def test_frame_validation():
    with pytest.raises(ValueError):
        BridgeFrame(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        BridgeFrame(float("nan"), 1.0, 1.0)


def test_split_symmetric_cases():
    s = split_at_minimum(BridgeFrame(0.4, -0.3, 1.3), 0.8, 0.0)
    assert s.g == 1.0 and s.p1 == pytest.approx(0.5) and s.tau1 == s.tau2
    s = split_at_minimum(BridgeFrame(0.7, 0.7, 2.0), 0.8, 0.0)
    assert s.tau1 == pytest.approx(1.0) and s.tau2 == pytest.approx(1.0)


def test_split_hand_example():
    s = split_at_minimum(BridgeFrame(0.0, 0.0, 1.0), 2.0, 1.0)
    g = 1.5 - math.sqrt(1.25)
    assert s.g == pytest.approx(g, rel=1e-14)
    assert s.g == pytest.approx(0.381966, abs=1e-6)
    assert s.m == pytest.approx(-1.0)
    assert s.tau1 == pytest.approx(1.0 / (1.0 + g))
    assert s.tau2 == pytest.approx(1.0 / (1.0 + 1.0 / g))
    assert s.p1 == pytest.approx((g * 2.0 + 2.0) / ((1 + g) * (2.0 + 2.0)))
    assert s.p1 + s.p2 == 1.0


def test_split_ranges_and_identity_bulk():
    rng = np.random.default_rng(1)
    n = 10**6
    x, y = rng.normal(0, 3, n), rng.normal(0, 3, n)
    t, E, Z = rng.uniform(0.01, 5, n), rng.exponential(size=n), rng.normal(size=n)
    m, dx, dy, g, t1, t2, p1 = _split(x, y, t, E, Z)
    assert np.all(m < np.minimum(x, y))
    assert np.max(np.abs(dx * dy - t * E / 2) / (t * E / 2)) < 1e-12
    assert np.all((p1 > 0) & (p1 < 1))
    assert np.all((t1 > 0) & (t1 < t) & (t2 > 0) & (t2 < t))
    assert np.all(g > 0)


def test_sample_tau_indicator():
    s = split_at_minimum(BridgeFrame(0.1, 0.5, 1.0), 0.3, 0.9)
    assert sample_tau(s, 0.0) == s.tau1
    assert sample_tau(s, 1.0) == s.tau2


def _grid_bridge_min_location(x, y, t, n, k, rng, chunk=5000):
    """Minimum of directly simulated Brownian bridges: value exact, location as the midpoint of its grid cell."""
    steps = 1 << k
    h = t / steps
    s = np.linspace(0, t, steps + 1)
    locs, mins = [], []
    for start in range(0, n, chunk):
        c = min(chunk, n - start)
        W = np.concatenate([np.zeros((c, 1)), np.cumsum(rng.normal(0, math.sqrt(h), (c, steps)), axis=1)], axis=1)
        B = x + W - (s / t) * (W[:, -1:] - (y - x))
        a, b = B[:, :-1], B[:, 1:]
        seg = 0.5 * (a + b - np.sqrt((b - a) ** 2 - 2 * h * np.log(rng.random((c, steps)))))
        j = np.argmin(seg, axis=1)
        locs.append((j + 0.5) * h)
        mins.append(seg[np.arange(c), j])
    return np.concatenate(locs), np.concatenate(mins)


@pytest.mark.slow
def test_tau_and_minimum_law_against_grid_oracle():
    x, y, t, n = 0.3, -0.2, 1.0, 10**5
    rng = np.random.default_rng(2024)
    locs, mins = _grid_bridge_min_location(x, y, t, n, 10, rng)
    E, Z, V = rng.exponential(size=n), rng.normal(size=n), rng.random(n)
    m, dx, dy, g, t1, t2, p1 = _split(x, y, t, E, Z)
    tau = np.where(V <= p1, t1, t2)
    # segment minima are exact, so the oracle's argmin segment is exactly the one holding tau
    h = t / 2**10
    tau_cell = (np.floor(tau / h) + 0.5) * h
    crit = ks_critical(n, n)
    assert stats.ks_2samp(tau_cell, locs).statistic < crit
    assert stats.ks_2samp(m, mins).statistic < crit


def test_bb_discrete_examples():
    assert bb_discrete([], []).size == 0
    assert bb_discrete([0.5], [1.7])[0] == pytest.approx(0.85)
    with pytest.raises(ValueError):
        bb_discrete([0.5, 0.4], [1.0, 1.0])
    with pytest.raises(ValueError):
        bb_discrete([0.0], [1.0])


def test_bb_discrete_covariance():
    s = np.array([0.25, 0.5, 0.75])
    rng = np.random.default_rng(4)
    n = 10**5
    N = rng.normal(size=(n, 3))
    prev = np.concatenate([[0.0], s[:-1]])
    coef = np.sqrt((s - prev) / ((1 - prev) * (1 - s)))
    W = (1 - s) * np.cumsum(N * coef, axis=1)
    assert np.allclose(bb_discrete(s, N[0]), W[0])
    C = np.cov(W.T)
    target = np.minimum.outer(s, s) * (1 - np.maximum.outer(s, s))
    # se of a sample covariance of Gaussians ~ sqrt((s_jj s_kk + s_jk^2) / n)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / n)
    assert np.all(np.abs(C - target) < 3 * se)


def test_chi_values_empty_and_zero_noise():
    f = BridgeFrame(0.5, 0.2, 1.0)
    s = split_at_minimum(f, 0.7, 0.4)
    assert chi_values(f, s, [], np.zeros((3, 0)), 1).size == 0
    Y = np.array([s.tau1 * 0.3, s.tau1 * 0.8])
    chi = chi_values(f, s, Y, np.zeros((3, 2)), 1)
    assert np.allclose(chi, s.m + (f.x - s.m) * (s.tau1 - Y) / s.tau1)
    Y2 = np.array([s.tau1 + 0.1 * (1 - s.tau1), s.tau1 + 0.6 * (1 - s.tau1)])
    chi2 = chi_values(f, s, Y2, np.zeros((3, 2)), 1)
    assert np.allclose(chi2, s.m + (f.y - s.m) * (Y2 - s.tau1) / (1 - s.tau1))


def test_chi_values_disjoint_gaussian_pools():
    f = BridgeFrame(0.5, 0.2, 1.0)
    s = split_at_minimum(f, 0.7, 0.4)
    tau = s.tau1
    Y = np.sort(np.concatenate([tau * np.array([0.2, 0.6]), tau + (1 - tau) * np.array([0.3, 0.7])]))
    rng = np.random.default_rng(0)
    N = rng.normal(size=(3, 4))
    base = chi_values(f, s, Y, N, 1)
    N2 = N.copy()
    N2[:, 3] = rng.normal(size=3)  # last point is after tau
    moved = chi_values(f, s, Y, N2, 1)
    assert np.array_equal(base[:2], moved[:2])
    N3 = N.copy()
    N3[:, 0] = rng.normal(size=3)
    moved = chi_values(f, s, Y, N3, 1)
    assert np.array_equal(base[2:], moved[2:])
    assert np.all(base >= s.m)


def test_chi_values_guard_error():
    f = BridgeFrame(0.5, 0.2, 1.0)
    s = split_at_minimum(f, 0.7, 0.4)
    with pytest.raises(DegenerateInputError):
        chi_values(f, s, [s.tau1], np.zeros((3, 1)), 1)
    with pytest.raises(ValueError):
        chi_values(f, s, [0.3], np.zeros((3, 1)), 3)


def test_compiled_kernels_match_reference():
    rng = np.random.default_rng(1)
    n = 3000
    counts = rng.poisson(3, n)
    counts[:5] = 60  # exercise the log-space product
    L = RaggedLayout.from_counts(counts)
    x, y = rng.normal(0, 1, n), rng.normal(0, 1, n)
    t, E, Z = rng.uniform(0.5, 2, n), rng.exponential(size=n), rng.normal(size=n)
    m, dx, dy, g, t1, t2, p1 = _split(x, y, t, E, Z)
    Y = np.concatenate([np.sort(rng.uniform(0, t[e], c)) for e, c in enumerate(counts)])
    N = rng.normal(size=(3, Y.size))
    for tau in (t1, t2):
        ref = chi_kernel(m, dx, dy, t, guard_tau(tau, t, Y, L), Y, L.previous_times(Y), N, L)
        assert np.array_equal(ref, chi_ragged(m, dx, dy, t, tau, Y, N, L))
    f1, f2 = rng.uniform(0.5, 1, Y.size), rng.uniform(0.5, 1, Y.size)
    ref = p1 * L.product(f1) + (1 - p1) * L.product(f2)
    assert np.allclose(mixed_products(f1, f2, p1, L), ref, rtol=1e-12, atol=0)


def test_ea_bm_accepts_first(bm):
    f = BridgeFrame(0.0, 0.3, 1.0)
    for j in range(1, 20):
        skel, used = ea_bridge_sampler(bm, np.array([0.5]), f, StreamKey(1, 1, j))
        assert used == 1 and skel.times.size == 0
    _, K = ea_batch(bm, np.array([0.5]), f, 3, np.arange(1, 1001))
    assert np.all(K == 1)


def test_ea_skeleton_structure(logistic, theta0):
    f = BridgeFrame(float(logistic.eta(700.0, theta0)), float(logistic.eta(760.0, theta0)), 1.0)
    for j in range(1, 50):
        skel, used = ea_bridge_sampler(logistic, theta0, f, StreamKey(5, 1, j))
        assert np.all(skel.values >= skel.min_value)
        ts, vs = skel.with_endpoints()
        assert vs[0] == f.x and vs[-1] == f.y and ts[-1] == f.t
        assert np.all(np.diff(ts) > 0)


def test_ea_iteration_cap(logistic, theta0):
    f = BridgeFrame(float(logistic.eta(700.0, theta0)), float(logistic.eta(760.0, theta0)), 1.0)
    with pytest.raises(IterationCapError):
        # with a tiny cap some replicate will still be unaccepted
        ea_batch(logistic, theta0, f, 1, np.arange(1, 20001), max_proposals=1)


def test_am_unit_cases(bm):
    f = BridgeFrame(0.0, 0.3, 1.0)
    assert am_pointwise(bm, np.array([0.5]), f, StreamKey(1)) == 1.0
    assert np.all(am_batch(bm, np.array([0.5]), f, 2, np.arange(1, 100)) == 1.0)


def test_am_thinning_invariance(logistic, theta0):
    f = BridgeFrame(float(logistic.eta(700.0, theta0)), float(logistic.eta(760.0, theta0)), 1.0)
    reps = np.arange(1, 10**6 + 1)
    a1 = am_batch(logistic, theta0, f, 11, reps, rate_factor=1.0)
    a2 = am_batch(logistic, theta0, f, 12, reps, rate_factor=2.0)
    assert np.all((a1 >= 0) & (a1 <= 1)) and np.all((a2 >= 0) & (a2 <= 1))
    se = math.hypot(a1.std() / 1e3, a2.std() / 1e3)
    assert abs(a1.mean() - a2.mean()) < 3 * se
    with pytest.raises(ValueError):
        am_batch(logistic, theta0, f, 1, reps[:3], rate_factor=0.5)
