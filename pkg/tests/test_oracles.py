import math

import numpy as np
import pytest
from scipy import stats

from samle.bridge import BridgeFrame
from samle.oracles import (
    EulerConfig,
    ObservationSeries,
    brute_density,
    conditioned_bridge_oracle,
    simulate_dataset,
    simulate_datasets,
)
from samle.rng import StreamKey


def test_bm_brute_density_matches_gaussian(bm):
    mu, v, w, t = 0.4, 0.0, 0.9, 1.0
    est, se = brute_density(bm, [mu], v, w, t, EulerConfig(4, 400_000), StreamKey(3))
    exact = stats.norm.pdf(w, v + mu * t, math.sqrt(t))
    assert abs(est - exact) < 4 * se


def test_bm_increments_are_gaussian(bm):
    data = simulate_dataset(bm, [0.3], 0.0, 5000, 0.5, EulerConfig(2), 11)
    inc = np.diff(data.values)
    res = stats.kstest(inc, "norm", args=(0.15, math.sqrt(0.5)))
    assert res.pvalue > 0.001


def test_series_shape_and_preconditions(bm, logistic, theta0):
    s = simulate_dataset(logistic, theta0, 700.0, 1, 1.0, EulerConfig(8), 2)
    assert s.n == 1 and s.values.size == 2 and s.values[0] == 700.0
    with pytest.raises(ValueError):
        simulate_dataset(bm, [0.0], 0.0, 0, 1.0, EulerConfig(2), 1)
    with pytest.raises(ValueError):
        simulate_dataset(logistic, theta0, -5.0, 3, 1.0, EulerConfig(8), 1)


def test_simulation_is_deterministic_and_replicates_differ(logistic, theta0):
    a = simulate_datasets(logistic, theta0, 700.0, 20, 1.0, EulerConfig(8), 5, [1, 2])
    b = simulate_datasets(logistic, theta0, 700.0, 20, 1.0, EulerConfig(8), 5, [2])
    assert np.array_equal(a[1].values, b[0].values)
    assert not np.array_equal(a[0].values, a[1].values)
    assert np.all(a[0].values > 0)


def test_logistic_stationary_mean(logistic, theta0):
    # stationary mean of the logistic diffusion is c (1 - sigma^2 / (2 r))
    r, c, sigma = theta0
    target = c * (1 - sigma**2 / (2 * r))
    s = simulate_dataset(logistic, theta0, target, 40_000, 1.0, EulerConfig(6), 4)
    x = s.values[1000:]
    batches = x[: x.size // 100 * 100].reshape(100, -1).mean(axis=1)
    se = batches.std(ddof=1) / math.sqrt(batches.size)
    assert abs(x.mean() - target) < 4 * se, (x.mean(), se)


def test_logistic_short_time_is_nearly_gaussian(logistic, theta0):
    # over a short step the transformed increment is close to N(drift * t, t)
    t, v = 0.01, 900.0
    y0 = float(logistic.eta(v, theta0))
    w = float(logistic.eta_inv(y0 + 0.05, theta0))
    est, se = brute_density(logistic, theta0, v, w, t, EulerConfig(6, 200_000, bin_width=0.01), StreamKey(8))
    drift = float(logistic.alpha(y0, theta0))
    approx = stats.norm.pdf(0.05, drift * t, math.sqrt(t)) * abs(float(logistic.eta_du(w, theta0)))
    assert abs(est / approx - 1) < 0.05


def test_bin_width_sweep_is_stable(logistic, theta0):
    key = StreamKey(9)
    e1, s1 = brute_density(logistic, theta0, 1000.0, 1010.0, 1.0, EulerConfig(6, 200_000, 0.1), key)
    e2, s2 = brute_density(logistic, theta0, 1000.0, 1010.0, 1.0, EulerConfig(6, 200_000, 0.05), key)
    assert abs(e1 - e2) < 4 * math.hypot(s1, s2)


def test_zero_hits_warns(bm, caplog):
    est, se = brute_density(bm, [0.0], 0.0, 30.0, 1.0, EulerConfig(2, 1000), StreamKey(1))
    assert est == 0.0 and se > 0
    assert "no path" in caplog.text


def test_conditioned_oracle_full_bin_accepts_everything():
    frame = BridgeFrame(0.3, -0.2, 1.0)
    out = conditioned_bridge_oracle(frame, (-50.0, -0.2), [0.25, 0.5], EulerConfig(paths=5000), StreamKey(2))
    assert out.acceptance_rate == 1.0
    assert out.values.shape == (5000, 2)
    # unconditioned Brownian bridge marginal at s
    s = 0.5
    res = stats.kstest(out.values[:, 1], "norm", args=(0.3 + (-0.5) * s, math.sqrt(s * (1 - s))))
    assert res.pvalue > 0.001


def test_conditioned_oracle_minima_inside_bin():
    frame = BridgeFrame(0.3, -0.2, 1.0)
    out = conditioned_bridge_oracle(frame, (-0.7, -0.6), [0.2, 0.5, 0.8], EulerConfig(paths=2000), StreamKey(3))
    assert np.all((out.minima >= -0.7) & (out.minima <= -0.6))
    assert np.all(out.values >= out.minima[:, None])
    assert 0 < out.acceptance_rate < 1


def test_conditioned_oracle_input_checks():
    frame = BridgeFrame(0.3, -0.2, 1.0)
    with pytest.raises(ValueError):
        conditioned_bridge_oracle(frame, (-0.5, 0.0), [0.5], EulerConfig(paths=10), 1)
    with pytest.raises(ValueError):
        conditioned_bridge_oracle(frame, (-0.5, -0.4), [1.5], EulerConfig(paths=10), 1)


def test_csv_roundtrip(tmp_path):
    s = ObservationSeries(np.array([0.0, 1.0, 2.5]), np.array([700.0, 1e-3 / 3, 812.25]))
    p = tmp_path / "d.csv"
    s.to_csv(p, ["seed: 1"])
    back = ObservationSeries.from_csv(p)
    assert np.array_equal(back.times, s.times) and np.array_equal(back.values, s.values)
    with pytest.raises(ValueError):
        ObservationSeries(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
