"""Synthetic data and brute-force reference values.

Everything here is independent of the likelihood estimator: paths are
simulated by Euler-Maruyama on the unit-diffusion scale, densities are
estimated by counting endpoints in a bin, and conditioned Brownian bridges
are produced by plain rejection.  Every oracle value comes with a standard
error.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .bridge import BridgeFrame
from .models import TransformedModel
from .rng import Purpose, StreamKey, key_hash, normals, uniforms

__all__ = [
    "ObservationSeries",
    "EulerConfig",
    "StateExitError",
    "AcceptanceStarvationError",
    "simulate_dataset",
    "simulate_datasets",
    "euler_endpoints",
    "brute_density",
    "conditioned_bridge_oracle",
    "BridgeOracleSample",
]

logger = logging.getLogger(__name__)

MAX_HALVINGS = 10
_HALVING_BLOCK = 40  # halving level j draws from counters [j << 40, (j+1) << 40)

# compiled drift codes; models outside this table use the numpy stepper
_DRIFT_CODES = {"bm-drift": 0, "logistic": 1}


class StateExitError(RuntimeError):
    """An Euler step left the state space even after repeated halving."""


class AcceptanceStarvationError(RuntimeError):
    """The rejection oracle accepted too few proposals."""


@dataclass
class ObservationSeries:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or self.times.shape != self.values.shape:
            raise ValueError("times and values must be 1-d arrays of equal length")
        if self.times.size < 2:
            raise ValueError("a series needs at least two observations")
        if self.times[0] != 0.0:
            raise ValueError("series must start at time 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n(self) -> int:
        """Number of observation intervals."""
        return self.times.size - 1

    def intervals(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(v, w, t) arrays, one entry per interval."""
        return self.values[:-1].copy(), self.values[1:].copy(), np.diff(self.times)

    def check(self, model: TransformedModel) -> None:
        model.check_state(self.values)

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "value"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "ObservationSeries":
        rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        reader = csv.reader(rows)
        head = next(reader)
        if [h.strip() for h in head] != ["time", "value"]:
            raise ValueError(f"{path}: expected header 'time,value', got {head}")
        data = np.array([[float(a), float(b)] for a, b in reader])
        if data.ndim != 2 or data.shape[0] < 2:
            raise ValueError(f"{path}: need at least two observations")
        return cls(data[:, 0], data[:, 1])


@dataclass(frozen=True)
class EulerConfig:
    substeps_log2: int = 8
    paths: int = 100_000
    bin_width: float | None = None

    def __post_init__(self):
        if self.substeps_log2 < 0:
            raise ValueError("substeps_log2 must be nonnegative")
        if self.paths < 1:
            raise ValueError("paths must be positive")
        if self.bin_width is not None and not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if self.substeps_log2 < 8:
            logger.info("Euler grid with k=%d is coarser than the k >= 8 used for oracle work", self.substeps_log2)


# -- compiled Euler stepper ---------------------------------------------------


@njit(cache=True)
def _mix(z):  # pragma: no cover - compiled
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _unif(key, c):  # pragma: no cover - compiled
    z = _mix(key + (c + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15))
    return (float(z >> np.uint64(11)) + 0.5) * 2.0**-53


@njit(cache=True)
def _normal(key, c):  # pragma: no cover - compiled
    # Box-Muller on the uniform pair (2p, 2p+1); even counters take the cosine leg
    p = c >> np.uint64(1)
    u1 = _unif(key, p << np.uint64(1))
    u2 = _unif(key, (p << np.uint64(1)) + np.uint64(1))
    rad = math.sqrt(-2.0 * math.log(u1))
    if c & np.uint64(1):
        return rad * math.sin(2.0 * math.pi * u2)
    return rad * math.cos(2.0 * math.pi * u2)


@njit(cache=True)
def _alpha(code, u, p):  # pragma: no cover - compiled
    if code == 0:
        return p[0]
    # logistic growth on the negated log scale
    delta, c, sigma = p[0], p[1], p[2]
    return sigma / 2.0 - delta / sigma + delta / (sigma * c) * math.exp(-sigma * u)


@njit(cache=True)
def _advance(code, p, x, h, steps, key, lo, hi):  # pragma: no cover - compiled
    # `steps` Euler steps of size h from x; returns (x, ok)
    sq = math.sqrt(h)
    spare = 0.0
    for s in range(steps):
        # both Box-Muller legs of a pair, as in _normal, without recomputing
        if s & 1:
            z = spare
        else:
            u1 = _unif(key, np.uint64(s))
            u2 = _unif(key, np.uint64(s + 1))
            rad = math.sqrt(-2.0 * math.log(u1))
            z = rad * math.cos(2.0 * math.pi * u2)
            spare = rad * math.sin(2.0 * math.pi * u2)
        xn = x + _alpha(code, x, p) * h + sq * z
        if not (lo < xn < hi):
            # retry this step on a finer grid with fresh normals
            ok = False
            for j in range(1, 11):
                sub = 1 << j
                hs = h / sub
                sqs = math.sqrt(hs)
                xs = x
                good = True
                base = (np.uint64(j) << np.uint64(40)) + np.uint64(s * sub)
                for q in range(sub):
                    xs = xs + _alpha(code, xs, p) * hs + sqs * _normal(key, base + np.uint64(q))
                    if not (lo < xs < hi):
                        good = False
                        break
                if good:
                    xn = xs
                    ok = True
                    break
            if not ok:
                return x, False
        x = xn
    return x, True


@njit(cache=True)
def _euler_paths(code, p, x0, t, steps, keys, lo, hi, out):  # pragma: no cover - compiled
    # one interval per path; keys[i] addresses path i
    h = t / steps
    fails = 0
    for i in range(x0.size):
        x, ok = _advance(code, p, x0[i], h, steps, keys[i], lo, hi)
        out[i] = x if ok else math.nan
        if not ok:
            fails += 1
    return fails


@njit(cache=True)
def _euler_series(code, p, x0, dts, steps, keys, lo, hi, out):  # pragma: no cover - compiled
    # keys[r, i] addresses interval i of replicate r; out[r, 0] = x0[r]
    R, n = keys.shape
    fails = 0
    for r in range(R):
        x = x0[r]
        out[r, 0] = x
        for i in range(n):
            x, ok = _advance(code, p, x, dts[i] / steps, steps, keys[r, i], lo, hi)
            if not ok:
                fails += 1
                for k in range(i + 1, n + 1):
                    out[r, k] = math.nan
                break
            out[r, i + 1] = x
    return fails


def _numpy_advance(model, theta, x, h, steps, keys):
    """Fallback stepper for models without a compiled drift (no halving support)."""
    lo, hi = model.transformed_space
    sq = math.sqrt(h)
    for s in range(steps):
        x = x + np.asarray(model.alpha(x, theta)) * h + sq * normals(keys, s)
        if np.any(~((x > lo) & (x < hi))):
            raise StateExitError(f"{model.name}: Euler path left the transformed space")
    return x


def euler_endpoints(model: TransformedModel, theta, x0, t: float, k: int, keys) -> np.ndarray:
    """Transformed-scale Euler endpoints at time t from x0, one path per key."""
    theta = np.asarray(theta, dtype=float)
    keys = np.asarray(keys, dtype=np.uint64)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), keys.shape).copy()
    steps = 1 << k
    code = _DRIFT_CODES.get(model.name)
    if code is None:
        return _numpy_advance(model, theta, x0, t / steps, steps, keys)
    out = np.empty(keys.size)
    lo, hi = (float(b) for b in model.transformed_space)
    fails = _euler_paths(code, theta, x0, float(t), steps, keys, lo, hi, out)
    if fails:
        raise StateExitError(f"{fails} Euler path(s) left the transformed space after {MAX_HALVINGS} halvings")
    return out


# -- datasets -----------------------------------------------------------------


def simulate_datasets(model: TransformedModel, theta0, V0: float, n: int, dt: float, euler: EulerConfig,
                      seed: int, replicates=(1,)) -> list[ObservationSeries]:
    """One series per replicate index; replicate r uses keys (seed, interval, r, EULER)."""
    if n < 1:
        raise ValueError("need n >= 1 intervals")
    if not dt > 0:
        raise ValueError("dt must be positive")
    theta0 = np.asarray(theta0, dtype=float)
    model.check_state(V0)
    reps = np.atleast_1d(np.asarray(replicates, dtype=np.int64))
    keys = key_hash(seed, np.arange(1, n + 1)[None, :], reps[:, None], Purpose.EULER)
    x0 = np.full(reps.size, float(model.eta(V0, theta0)))
    dts = np.full(n, float(dt))
    steps = 1 << euler.substeps_log2
    code = _DRIFT_CODES.get(model.name)
    if code is None:
        X = np.empty((reps.size, n + 1))
        X[:, 0] = x0
        for i in range(n):
            X[:, i + 1] = _numpy_advance(model, theta0, X[:, i], dt / steps, steps, keys[:, i])
    else:
        X = np.empty((reps.size, n + 1))
        lo, hi = (float(b) for b in model.transformed_space)
        fails = _euler_series(code, theta0, x0, dts, steps, keys, lo, hi, X)
        if fails:
            raise StateExitError(f"{fails} replicate(s) left the state space after {MAX_HALVINGS} halvings")
    times = dt * np.arange(n + 1)
    V = model.eta_inv(X, theta0)
    V[:, 0] = V0
    return [ObservationSeries(times, V[r]) for r in range(reps.size)]


def simulate_dataset(model: TransformedModel, theta0, V0: float, n: int, dt: float, euler: EulerConfig,
                     key: StreamKey | int) -> ObservationSeries:
    """Observations at times 0, dt, ..., n dt of one Euler path started at V0."""
    if isinstance(key, StreamKey):
        seed, rep = key.experiment_seed, key.replicate_index
    else:
        seed, rep = int(key), 1
    return simulate_datasets(model, theta0, V0, n, dt, euler, seed, (rep,))[0]


# -- transition density by binning --------------------------------------------


def brute_density(model: TransformedModel, theta, v: float, w: float, t: float, euler: EulerConfig,
                  key: StreamKey | int, chunk: int = 1 << 18) -> tuple[float, float]:
    """(estimate, standard error) of p_t(v, w; theta) from binned Euler endpoints.

    The bin is centred at eta(w) on the transformed scale with width
    ``euler.bin_width`` (default 0.05 sqrt(t)); the result is converted to the
    original scale with |eta'(w)|.
    """
    theta = np.asarray(theta, dtype=float)
    model.check_state(v, w)
    if not t > 0:
        raise ValueError("t must be positive")
    seed, interval = (key.experiment_seed, key.interval_index) if isinstance(key, StreamKey) else (int(key), 1)
    b = euler.bin_width if euler.bin_width is not None else 0.05 * math.sqrt(t)
    x = float(model.eta(v, theta))
    y = float(model.eta(w, theta))
    M = euler.paths
    hits = 0
    for start in range(0, M, chunk):
        idx = np.arange(start + 1, min(start + chunk, M) + 1)
        keys = key_hash(seed, interval, idx, Purpose.ORACLE)
        ends = euler_endpoints(model, theta, x, t, euler.substeps_log2, keys)
        hits += int(np.count_nonzero(np.abs(ends - y) < 0.5 * b))
    jac = abs(float(model.eta_du(w, theta)))
    p = hits / M
    if hits == 0:
        logger.warning("brute_density: no path landed in the bin (M=%d, width=%g)", M, b)
        # rule-of-three style upper scale so the SE is never reported as zero
        return 0.0, jac * 3.0 / (M * b)
    return jac * p / b, jac * math.sqrt(p * (1.0 - p) / M) / b


# -- Brownian bridge conditioned on its minimum -------------------------------


@dataclass
class BridgeOracleSample:
    values: np.ndarray  # accepted x query-times
    minima: np.ndarray
    accepted: int
    proposals: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals


def conditioned_bridge_oracle(frame: BridgeFrame, m_bin: tuple[float, float], times, euler: EulerConfig,
                              key: StreamKey | int, max_proposals: int = 10**7,
                              chunk: int = 1 << 20) -> BridgeOracleSample:
    """Brownian bridges from (0, x) to (t, y) with minimum in ``m_bin``, read at ``times``.

    Proposals are unconditioned bridges sampled at the query times; the
    minimum over each gap between consecutive times is drawn exactly from its
    conditional law given the gap endpoints, and the proposal is kept when the
    overall minimum falls in the bin.  ``euler.paths`` is the target number of
    accepted samples.
    """
    m_lo, m_hi = (float(a) for a in m_bin)
    lo_x = min(frame.x, frame.y)
    if not m_hi <= lo_x:
        raise ValueError("upper end of the minimum bin must not exceed min(x, y)")
    if not m_lo < m_hi:
        raise ValueError("empty minimum bin")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0) or times[0] <= 0 or times[-1] >= frame.t:
        raise ValueError("query times must be increasing and inside (0, t)")
    seed = key.experiment_seed if isinstance(key, StreamKey) else int(key)
    interval = key.interval_index if isinstance(key, StreamKey) else 1
    grid = np.concatenate([[0.0], times, [frame.t]])
    gaps = np.diff(grid)
    q = times.size
    want = euler.paths
    kept_v, kept_m = [], []
    accepted = proposals = 0
    while accepted < want and proposals < max_proposals:
        size = min(chunk, max_proposals - proposals)
        idx = np.arange(proposals + 1, proposals + size + 1)
        keys = key_hash(seed, interval, idx, Purpose.ORACLE)
        # sequential bridge construction: point k given point k-1 and the endpoint
        vals = np.empty((size, q + 2))
        vals[:, 0] = frame.x
        vals[:, -1] = frame.y
        for k in range(q):
            s0, s1 = grid[k], grid[k + 1]
            rem = frame.t - s0
            mean = vals[:, k] + (frame.y - vals[:, k]) * (s1 - s0) / rem
            sd = math.sqrt((s1 - s0) * (frame.t - s1) / rem)
            vals[:, k + 1] = mean + sd * normals(keys, k)
        mins = np.full(size, np.inf)
        for k in range(q + 1):
            a, b = vals[:, k], vals[:, k + 1]
            u = uniforms(keys, q + k)
            seg = 0.5 * (a + b - np.sqrt((b - a) ** 2 - 2.0 * gaps[k] * np.log(u)))
            mins = np.minimum(mins, seg)
        ok = (mins >= m_lo) & (mins <= m_hi)
        kept_v.append(vals[ok, 1:-1])
        kept_m.append(mins[ok])
        accepted += int(ok.sum())
        proposals += size
    if accepted < 100:
        raise AcceptanceStarvationError(f"only {accepted} accepted in {proposals} proposals")
    values = np.concatenate(kept_v)[:want]
    minima = np.concatenate(kept_m)[:want]
    return BridgeOracleSample(values, minima, accepted, proposals)
