"""Named end-to-end checks of the estimator against independent references.

Each check returns a :class:`CheckResult` holding the measured statistic,
the threshold it is compared with and the wall-clock time.  The default
sizes are the full ones; smaller sizes can be passed for smoke runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import ks_2samp

from .bridge import BridgeFrame, RaggedLayout, _minimum, _split, am_batch, chi_ragged, ea_batch
from .experiments import derived_seed, run_ladder, run_nscaling, run_table2
from .mle import SimplexConfig
from .models import DriftedBrownianModel, LogisticGrowthModel, ParameterBox
from .oracles import EulerConfig, brute_density, conditioned_bridge_oracle, simulate_dataset
from .rng import Purpose, gaussian_columns, key_hash, normals, uniforms
from .sam import LikelihoodSurface

__all__ = ["CheckResult", "CHECKS", "run_checks", "ks_critical", "LOGISTIC_BOX", "THETA0", "START"]

THETA0 = np.array([0.1, 1000.0, 0.1])
START = np.array([0.05, 1150.0, 0.115])
V0 = 700.0
LOGISTIC_BOX = ParameterBox.from_pairs([(0.03, 0.18), (850.0, 1200.0), (0.09, 0.12)])

# (theta, v, w, t) for the density comparisons
DENSITY_CONFIGS = [
    (THETA0, 1000.0, 1010.0, 1.0),
    (np.array([0.05, 900.0, 0.095]), 700.0, 760.0, 1.0),
    (np.array([0.15, 1100.0, 0.11]), 1150.0, 1050.0, 0.5),
    (np.array([0.12, 950.0, 0.10]), 800.0, 900.0, 2.0),
    (np.array([0.08, 1000.0, 0.115]), 1200.0, 1100.0, 1.0),
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    statistic: float
    threshold: float
    seconds: float
    time_limit: float
    detail: str = ""
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: statistic={self.statistic:.6g} threshold={self.threshold:.6g} "
                f"time={self.seconds:.1f}s/{self.time_limit:.0f}s {self.detail}")

    def row(self) -> tuple:
        return (self.name, int(self.passed), self.statistic, self.threshold, round(self.seconds, 3), self.detail)


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Asymptotic two-sample Kolmogorov-Smirnov critical value."""
    return math.sqrt(-0.5 * math.log(alpha / 2.0)) * math.sqrt((n + m) / (n * m))


def _finish(name, ok, stat, thr, t0, limit, detail="", **extra) -> CheckResult:
    dt = time.perf_counter() - t0
    return CheckResult(name, bool(ok) and dt < limit, float(stat), float(thr), dt, limit, detail, extra)


def reference_dataset(seed: int, n: int = 1000) -> "object":
    return simulate_dataset(LogisticGrowthModel(), THETA0, V0, n, 1.0, EulerConfig(8), seed)


# -- 1 ------------------------------------------------------------------------


def check_zero_variance(seed: int = 1, N: int = 10_000) -> CheckResult:
    t0 = time.perf_counter()
    model = DriftedBrownianModel()
    box = ParameterBox.from_pairs([(-1.0, 1.0)])
    surf = LikelihoodSurface.build(model, box, np.array([0.0]), np.array([0.3]), 1.0, seed, N)
    vals = surf.element_values(np.array([0.5]))
    exact = math.exp(-0.5 * 0.2**2) / math.sqrt(2.0 * math.pi)
    var = float(np.var(vals, ddof=1))
    err = float(np.max(np.abs(vals - exact)))
    ok = var < 1e-24 and err < 1e-12
    return _finish("zero_variance", ok, var, 1e-24, t0, 1.0, f"max|L-N(-0.2)|={err:.3g}")


# -- 2 and 10 -----------------------------------------------------------------


def check_unbiasedness(seed: int = 2, N: int = 10**6, paths: int = 10**6, k: int = 10) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    worst = 0.0
    parts = []
    for i, (theta, v, w, t) in enumerate(DENSITY_CONFIGS):
        surf = LikelihoodSurface.build(model, LOGISTIC_BOX, np.array([v]), np.array([w]), t,
                                       derived_seed(seed, 1, i), N)
        L = surf.element_values(theta)
        mc, mc_se = float(L.mean()), float(L.std(ddof=1) / math.sqrt(L.size))
        del surf, L
        ref, ref_se = brute_density(model, theta, v, w, t, EulerConfig(k, paths), derived_seed(seed, 2, i))
        z = abs(mc - ref) / math.hypot(mc_se, ref_se)
        worst = max(worst, z)
        parts.append(f"{mc:.5g}~{ref:.5g}(z={z:.2f})")
    return _finish("unbiasedness", worst < 3.0, worst, 3.0, t0, 600.0, " ".join(parts))


def check_oracle_refinement(seed: int = 10, paths: int = 10**6, k: int = 8) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    worst = 0.0
    parts = []
    for i, (theta, v, w, t) in enumerate(DENSITY_CONFIGS):
        a, sa = brute_density(model, theta, v, w, t, EulerConfig(k, paths), derived_seed(seed, 1, i))
        b, sb = brute_density(model, theta, v, w, t, EulerConfig(k + 1, paths), derived_seed(seed, 2, i))
        z = abs(a - b) / math.hypot(sa, sb)
        worst = max(worst, z)
        parts.append(f"z={z:.2f}")
    return _finish("oracle_refinement", worst < 3.0, worst, 3.0, t0, 600.0, " ".join(parts))


# -- 3 ------------------------------------------------------------------------


def check_ea_am(seed: int = 3, runs: int = 10**5, interval: int = 1) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    data = reference_dataset(derived_seed(seed, 1))
    v, w, t = (float(a[interval - 1]) for a in data.intervals())
    frame = BridgeFrame(float(model.eta(v, THETA0)), float(model.eta(w, THETA0)), t)
    reps = np.arange(1, runs + 1)
    _, K = ea_batch(model, THETA0, frame, derived_seed(seed, 2), reps)
    freq = runs / float(K.sum())
    freq_se = freq * math.sqrt(max(1.0 - freq, 0.0) / runs)
    a = am_batch(model, THETA0, frame, derived_seed(seed, 3), reps)
    am, am_se = float(a.mean()), float(a.std(ddof=1) / math.sqrt(runs))
    z = abs(freq - am) / math.hypot(freq_se, am_se)
    return _finish("ea_am", z < 3.0, z, 3.0, t0, 300.0, f"EA={freq:.5f} AM={am:.5f}")


# -- 4 ------------------------------------------------------------------------


def chi_mixture_sample(frame: BridgeFrame, m_bin, times, n: int, seed: int) -> np.ndarray:
    """Skeleton values at ``times`` drawn through the minimum decomposition, minimum restricted to m_bin.

    E is drawn from its exponential law truncated to the bin (the map E -> m
    is monotone), then Z, the branch and the Gaussian columns as in the
    estimator.
    """
    lo, hi = m_bin
    E_of = lambda m: 2.0 * (frame.x - m) * (frame.y - m) / frame.t  # noqa: E731
    Ea, Eb = E_of(hi), E_of(lo)
    idx = np.arange(1, n + 1)
    u = uniforms(key_hash(seed, 1, idx, Purpose.EXPONENTIAL), 0)
    E = Ea - np.log1p(-u * -np.expm1(-(Eb - Ea)))
    Z = normals(key_hash(seed, 1, idx, Purpose.GAUSSIAN_Z), 0)
    m, dx, dy, _, tau1, tau2, p1 = _split(frame.x, frame.y, frame.t, E, Z)
    V = uniforms(key_hash(seed, 1, idx, Purpose.TAU_UNIFORM), 0)
    tau = np.where(V <= p1, tau1, tau2)
    q = len(times)
    layout = RaggedLayout.from_counts(np.full(n, q))
    cols = gaussian_columns(key_hash(seed, 1, idx, Purpose.GAUSSIAN_MATRIX), layout.counts)
    chi = chi_ragged(m, dx, dy, np.full(n, frame.t), tau, np.tile(times, n), cols, layout)
    return chi.reshape(n, q)


def check_coupling(seed: int = 4, n: int = 10**5) -> CheckResult:
    t0 = time.perf_counter()
    frame = BridgeFrame(0.3, -0.2, 1.0)
    m0 = float(_minimum(frame.x, frame.y, frame.t, 1.0)[0])
    half = 0.01 * math.sqrt(frame.t)
    m_bin = (m0 - half, m0 + half)
    times = frame.t * np.array([0.2, 0.5, 0.8])
    oracle = conditioned_bridge_oracle(frame, m_bin, times, EulerConfig(8, n), derived_seed(seed, 1),
                                       max_proposals=10**8)
    sam = chi_mixture_sample(frame, m_bin, times, n, derived_seed(seed, 2))
    crit = ks_critical(n, n)
    stats = [ks_2samp(sam[:, k], oracle.values[:, k]).statistic for k in range(times.size)]
    worst = max(stats)
    return _finish("coupling", worst < crit, worst, crit, t0, 600.0,
                   "D=" + ",".join(f"{s:.5f}" for s in stats) + f" oracle_acc={oracle.acceptance_rate:.4f}")


# -- 5 ------------------------------------------------------------------------


def check_identity(seed: int = 5, n: int = 10**6) -> CheckResult:
    t0 = time.perf_counter()
    idx = np.arange(1, n + 1)
    x = 3.0 * normals(key_hash(seed, 1, idx, Purpose.ORACLE), 0)
    y = 3.0 * normals(key_hash(seed, 1, idx, Purpose.ORACLE), 1)
    t = 0.01 + 5.0 * uniforms(key_hash(seed, 1, idx, Purpose.ORACLE), 2)
    E = -np.log(uniforms(key_hash(seed, 1, idx, Purpose.ORACLE), 3))
    _, xm, ym = _minimum(x, y, t, E)
    rel = np.abs(xm * ym - t * E / 2.0) / (t * E / 2.0)
    worst = float(rel.max())
    return _finish("identity", worst < 1e-12, worst, 1e-12, t0, 5.0)


# -- 6 ------------------------------------------------------------------------


def check_table1(seed: int = 6, n: int = 500, Ns=(1, 2, 5, 10, 50, 200, 800, 6400)) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    data = simulate_dataset(model, THETA0, V0, n, 1.0, EulerConfig(8), derived_seed(seed, 1))
    _, res = run_ladder(model, LOGISTIC_BOX, data, derived_seed(seed, 2), Ns, SimplexConfig(START))
    final = res[-1]
    se = final.se_obs
    if not np.all(np.isfinite(se)):
        return _finish("table1", False, math.nan, 1.0, t0, 1200.0, "no standard errors at the final maximiser")
    dist = {r.N: float(np.linalg.norm((r.theta_hat - final.theta_hat) / se)) for r in res}
    big = [r for r in res if r.N >= 200]
    worst = max(float(np.max(np.abs(r.theta_hat - final.theta_hat) / se)) for r in big)
    tail = [dist[N] for N in Ns if N >= 50]
    monotone = all(b <= a for a, b in zip(tail, tail[1:]))
    detail = "dist=" + ",".join(f"{N}:{dist[N]:.4f}" for N in Ns) + f" monotone={monotone}"
    return _finish("table1", worst < 1.0 and monotone, worst, 1.0, t0, 1200.0, detail,
                   results=res)


# -- 7 ------------------------------------------------------------------------


def check_table2(seed: int = 7, n: int = 250, R: int = 200, Ns=(25, 50, 100), ref_N: int = 10_000) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    data = simulate_dataset(model, THETA0, V0, n, 1.0, EulerConfig(8), derived_seed(seed, 1))
    cfg = SimplexConfig(THETA0, initial_scale=0.01)
    res = run_table2(model, LOGISTIC_BOX, data, Ns, R, derived_seed(seed, 2), cfg, ref_N=ref_N, ref_eps=1e-6)
    means = np.abs(res.means())
    decreasing = [bool(np.all(np.diff(means[:, j]) < 0)) for j in range(means.shape[1])]
    count = sum(decreasing)
    detail = "mean=" + ";".join(",".join(f"{v:.3g}" for v in row) for row in res.means())
    detail += " se=" + ";".join(",".join(f"{v:.2g}" for v in row) for row in res.ses())
    return _finish("table2", count >= 2, count, 2, t0, 3600.0, detail, result=res)


# -- 8 ------------------------------------------------------------------------


def check_poisson_load(seed: int = 8, n: int = 1000, N: int = 100) -> CheckResult:
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    data = reference_dataset(derived_seed(seed, 1), n)
    v, w, t = data.intervals()
    surf = LikelihoodSurface.build(model, LOGISTIC_BOX, v, w, t, derived_seed(seed, 2), N)
    counts = surf.draws.counts
    mean, mx = float(counts.mean()), int(counts.max())
    ok = abs(mean - 2.0) <= 0.3 and mx <= 15
    return _finish("poisson_load", ok, mean, 2.0, t0, 600.0, f"mean={mean:.4f} max={mx}")


# -- 9 ------------------------------------------------------------------------


def check_nscaling(seed: int = 9, R: int = 100) -> CheckResult:
    """Variance stabilisation under N = ceil(sqrt(n)) and bias growth under fixed N.

    The bias statistic at each n is the Euclidean norm of the per-coordinate
    mean of sqrt(n)(theta_hat - theta0), each coordinate divided by its
    sample standard deviation.
    """
    t0 = time.perf_counter()
    model = LogisticGrowthModel()
    cfg = SimplexConfig(START, eps_schedule=lambda N: 1e-6)
    pairs = [(100, "sqrt"), (400, "sqrt"), (100, "const:5"), (1600, "const:5")]
    res = run_nscaling(model, LOGISTIC_BOX, THETA0, V0, 1.0, pairs, R, derived_seed(seed, 1), cfg)
    v100, v400 = res[0].var(), res[1].var()
    ratio = np.maximum(v100 / v400, v400 / v100)
    var_ok = bool(np.all(ratio <= 2.0))

    def bias(r):
        return float(np.linalg.norm(r.mean() / np.sqrt(r.var())))

    b100, b1600 = bias(res[2]), bias(res[3])
    detail = (f"var_ratio={','.join(f'{x:.3f}' for x in ratio)} bias100={b100:.4f} bias1600={b1600:.4f} "
              f"mean100={','.join(f'{x:.4g}' for x in res[2].mean())} "
              f"mean1600={','.join(f'{x:.4g}' for x in res[3].mean())}")
    return _finish("nscaling", var_ok and b1600 > b100, float(ratio.max()), 2.0, t0, 7200.0, detail,
                   results=res, var_ok=var_ok, bias_ok=b1600 > b100)


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "zero_variance": check_zero_variance,
    "unbiasedness": check_unbiasedness,
    "ea_am": check_ea_am,
    "coupling": check_coupling,
    "identity": check_identity,
    "table1": check_table1,
    "table2": check_table2,
    "poisson_load": check_poisson_load,
    "nscaling": check_nscaling,
    "oracle_refinement": check_oracle_refinement,
}


def run_checks(names=None, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    names = list(CHECKS) if not names else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}; known: {', '.join(CHECKS)}")
    out = []
    for name in names:
        res = CHECKS[name]()
        out.append(res)
        if report is not None:
            report(res)
    return out
