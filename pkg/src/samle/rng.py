"""Counter-based keyed random streams.

Every draw in the package is a pure function of a :class:`StreamKey` and an
integer counter.  The key is hashed to a 64-bit stream state and the counter
selects a position in a SplitMix64 sequence started at that state, so any
draw can be regenerated in isolation, in any order, in parallel, without
touching the draws of other keys.

All batch functions take arrays of key hashes and are vectorised with numpy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, ndtri

__all__ = [
    "Purpose",
    "StreamKey",
    "key_hash",
    "uniforms",
    "normals",
    "exponentials",
    "poisson_counts",
    "poisson_times",
    "gaussian_columns",
    "draw_exponential",
    "draw_uniform",
    "draw_normal",
    "draw_poisson_process",
    "draw_gaussian_matrix",
    "ATTEMPT_SHIFT",
]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_FIELD_SALT = tuple(
    np.uint64(s)
    for s in (0x243F6A8885A308D3, 0x13198A2E03707344, 0xA4093822299F31D0, 0x082EFA98EC4E6C89)
)
_TO_UNIT = 2.0**-53

# Counter blocks: attempt a of a rejection loop draws from counters [a << 32, (a+1) << 32).
ATTEMPT_SHIFT = 32

# Poisson counts switch from inversion to transformed rejection above this mean.
_INVERSION_LIMIT = 30.0


class Purpose(enum.IntEnum):
    """Role of a draw; each role reads a disjoint substream of the same key."""

    EXPONENTIAL = 0
    GAUSSIAN_Z = 1
    POISSON_COUNT = 2
    POISSON_TIMES = 3
    GAUSSIAN_MATRIX = 4
    EULER = 5
    ORACLE = 6
    TAU_UNIFORM = 7
    ACCEPT_UNIFORM = 8


def _mix64(z: np.ndarray) -> np.ndarray:
    # wrap-around multiplication is intended; numpy only warns for scalars
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_u64(a) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind == "u":
        return arr.astype(np.uint64, copy=False)
    # negative integers wrap to their two's-complement bit pattern
    return arr.astype(np.int64).view(np.uint64)


def key_hash(seed, interval, replicate, purpose) -> np.ndarray:
    """Hash key fields (broadcastable integer arrays) to 64-bit stream states."""
    fields = np.broadcast_arrays(_as_u64(seed), _as_u64(interval), _as_u64(replicate), _as_u64(purpose))
    h = np.zeros(fields[0].shape, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for f, salt in zip(fields, _FIELD_SALT):
            h = _mix64(h ^ _mix64(f + salt))
    return h


@dataclass(frozen=True)
class StreamKey:
    """Address of one substream: (experiment seed, interval, replicate, purpose)."""

    experiment_seed: int
    interval_index: int = 1
    replicate_index: int = 1
    purpose: int = Purpose.EXPONENTIAL

    def with_purpose(self, purpose: int) -> "StreamKey":
        return replace(self, purpose=int(purpose))

    @property
    def hash(self) -> np.uint64:
        return key_hash(self.experiment_seed, self.interval_index, self.replicate_index, int(self.purpose))[()]


def uniforms(keys, counters) -> np.ndarray:
    """Uniform(0, 1) variates, open at both ends, one per (key, counter) pair."""
    keys = np.asarray(keys, dtype=np.uint64)
    with np.errstate(over="ignore"):
        c = _as_u64(counters) + np.uint64(1)
        out = _mix64(keys + c * _GAMMA)
    return ((out >> np.uint64(11)).astype(np.float64) + 0.5) * _TO_UNIT


def normals(keys, counters) -> np.ndarray:
    return ndtri(uniforms(keys, counters))


def exponentials(keys, counters=0) -> np.ndarray:
    return -np.log(uniforms(keys, counters))


def _poisson_inversion(keys: np.ndarray, mu: np.ndarray, base: np.ndarray) -> np.ndarray:
    u = uniforms(keys, base)
    k = np.zeros(mu.shape, dtype=np.int64)
    p = np.exp(-mu)
    cdf = p.copy()
    todo = np.nonzero(u > cdf)[0]
    while todo.size:
        k[todo] += 1
        p[todo] *= mu[todo] / k[todo]
        cdf[todo] += p[todo]
        # p underflowing to zero means the remaining tail is below rounding of the cdf
        todo = todo[(u[todo] > cdf[todo]) & (p[todo] > 0.0)]
    return k


def _poisson_ptrs(keys: np.ndarray, mu: np.ndarray, base: np.ndarray) -> np.ndarray:
    # Hormann (1993) transformed rejection with squeeze; two uniforms per attempt.
    slam = np.sqrt(mu)
    loglam = np.log(mu)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    out = np.full(mu.shape, -1, dtype=np.int64)
    todo = np.arange(mu.size)
    attempt = 0
    while todo.size:
        c = base[todo] + np.uint64(2 * attempt)
        U = uniforms(keys[todo], c) - 0.5
        V = uniforms(keys[todo], c + np.uint64(1))
        us = 0.5 - np.abs(U)
        k = np.floor((2.0 * a[todo] / us + b[todo]) * U + mu[todo] + 0.43)
        quick = (us >= 0.07) & (V <= vr[todo])
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(V) + np.log(invalpha[todo]) - np.log(a[todo] / (us * us) + b[todo])
            rhs = -mu[todo] + k * loglam[todo] - gammaln(k + 1.0)
        slow = ~quick & (k >= 0) & ~((us < 0.013) & (V > us)) & (lhs <= rhs)
        ok = quick | slow
        out[todo[ok]] = k[ok].astype(np.int64)
        todo = todo[~ok]
        attempt += 1
    return out


def poisson_counts(keys, mu, counter_base=0) -> np.ndarray:
    """Poisson(mu) counts, inversion for mu <= 30 and PTRS rejection above."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), keys.shape).copy()
    base = np.broadcast_to(_as_u64(counter_base), keys.shape).copy()
    if np.any(mu < 0) or not np.all(np.isfinite(mu)):
        raise ValueError("Poisson mean must be finite and nonnegative")
    out = np.zeros(keys.shape, dtype=np.int64)
    small = (mu > 0) & (mu <= _INVERSION_LIMIT)
    large = mu > _INVERSION_LIMIT
    if small.any():
        out[small] = _poisson_inversion(keys[small], mu[small], base[small])
    if large.any():
        out[large] = _poisson_ptrs(keys[large], mu[large], base[large])
    return out


def _ragged_positions(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element index and within-element position for each entry of a ragged layout."""
    total = int(counts.sum())
    owner = np.repeat(np.arange(counts.size), counts)
    starts = np.cumsum(counts) - counts
    pos = np.arange(total) - starts[owner]
    return owner, pos


def poisson_times(keys, counts, horizons, counter_base=0) -> np.ndarray:
    """Flat array of sorted point times; element k owns ``counts[k]`` consecutive entries."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    counts = np.asarray(counts, dtype=np.int64)
    horizons = np.broadcast_to(np.asarray(horizons, dtype=np.float64), keys.shape)
    base = np.broadcast_to(_as_u64(counter_base), keys.shape)
    owner, pos = _ragged_positions(counts)
    u = uniforms(keys[owner], base[owner] + pos.astype(np.uint64))
    order = np.lexsort((u, owner))
    return u[order] * horizons[owner]


def gaussian_columns(keys, counts, counter_base=0) -> np.ndarray:
    """3 x sum(counts) standard normals; column l of element k uses counters 3l..3l+2."""
    keys = np.atleast_1d(np.asarray(keys, dtype=np.uint64))
    counts = np.asarray(counts, dtype=np.int64)
    base = np.broadcast_to(_as_u64(counter_base), keys.shape)
    owner, pos = _ragged_positions(counts)
    c = base[owner] + (3 * pos).astype(np.uint64)
    kk = keys[owner]
    return np.stack([normals(kk, c + np.uint64(r)) for r in range(3)])


# -- single-key façade --------------------------------------------------------


def draw_uniform(key: StreamKey, counter: int = 0) -> float:
    return float(uniforms(key.hash, counter))


def draw_exponential(key: StreamKey, counter: int = 0) -> float:
    """Unit-mean exponential variate at ``counter`` of ``key``'s stream."""
    return float(exponentials(key.hash, counter))


def draw_normal(key: StreamKey, counter: int = 0) -> float:
    return float(normals(key.hash, counter))


def draw_poisson_process(key: StreamKey, rate: float, horizon: float, counter_base: int = 0) -> np.ndarray:
    """Sorted points of a homogeneous Poisson process of ``rate`` on (0, horizon).

    The count is drawn from ``key`` retagged ``POISSON_COUNT`` and the point
    locations from ``POISSON_TIMES``.
    """
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    kc = key.with_purpose(Purpose.POISSON_COUNT).hash
    kt = key.with_purpose(Purpose.POISSON_TIMES).hash
    n = poisson_counts(np.array([kc]), rate * horizon, counter_base)
    return poisson_times(np.array([kt]), n, horizon, counter_base)


def draw_gaussian_matrix(key: StreamKey, cols: int, rows: int = 3, counter_base: int = 0) -> np.ndarray:
    """``rows`` x ``cols`` independent standard normals (empty when ``cols`` is 0)."""
    if cols < 0:
        raise ValueError("cols must be nonnegative")
    if rows != 3:
        raise ValueError("only 3-row matrices are used by the bridge construction")
    return gaussian_columns(np.array([key.hash]), np.array([cols]), counter_base)
