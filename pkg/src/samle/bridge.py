"""Brownian bridge machinery on the unit-diffusion scale.

The bridge from (0, x) to (t, y) is decomposed at its minimum m, attained at
time tau, into two Bessel(3) bridges: one from x down to m over [0, tau] and
one from m up to y over [tau, t].  Each Bessel bridge is the norm of a
three-dimensional Brownian bridge with a linear drift along one axis, and the
Brownian bridges are evaluated at Poisson times from one shared matrix of
standard normals, with disjoint columns feeding the two sides.

The vectorised kernels here work on a ragged layout: element k owns
``counts[k]`` consecutive entries of a flat array of point times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .models import TransformedModel
from .rng import (
    ATTEMPT_SHIFT,
    Purpose,
    StreamKey,
    exponentials,
    gaussian_columns,
    key_hash,
    normals,
    poisson_counts,
    poisson_times,
    uniforms,
)

__all__ = [
    "BridgeFrame",
    "MinSplit",
    "PathSkeleton",
    "DegenerateInputError",
    "IterationCapError",
    "sample_minimum",
    "split_at_minimum",
    "sample_tau",
    "bb_discrete",
    "chi_values",
    "RaggedLayout",
    "ProposalBatch",
    "propose",
    "am_pointwise",
    "am_batch",
    "ea_bridge_sampler",
    "ea_batch",
]

# |tau - Y| below this fraction of t is treated as a coincidence.
TAU_GUARD = 1e-14
TAU_SHIFT = 1e-12
# Elements with more Poisson points than this take their product in log space.
LOG_PRODUCT_THRESHOLD = 50


class DegenerateInputError(ValueError):
    pass


class IterationCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BridgeFrame:
    """Bridge endpoints on the transformed scale: (0, x) to (t, y)."""

    x: float
    y: float
    t: float

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise ValueError("bridge duration must be positive and finite")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("bridge endpoints must be finite")


@dataclass(frozen=True)
class MinSplit:
    """Minimum of the bridge and the two candidate times at which it is attained.

    ``dx = x - m`` and ``dy = y - m`` are kept separately because they are
    computed without cancellation.
    """

    E: float
    m: float
    g: float
    tau1: float
    tau2: float
    p1: float
    p2: float
    dx: float
    dy: float

    @property
    def taus(self) -> tuple[float, float]:
        return self.tau1, self.tau2


@dataclass
class PathSkeleton:
    times: np.ndarray
    values: np.ndarray
    min_value: float
    tau: float
    frame: BridgeFrame | None = None

    def with_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        f = self.frame
        return (
            np.concatenate([[0.0], self.times, [f.t]]),
            np.concatenate([[f.x], self.values, [f.y]]),
        )


# -- vectorised kernels -------------------------------------------------------


def _minimum(x, y, t, E):
    """m, x - m, y - m for the bridge minimum driven by exponential E."""
    lo = np.minimum(x, y)
    D = np.abs(y - x)
    drop = t * E / (D + np.sqrt(2.0 * t * E + D * D))
    return lo - drop, (x - lo) + drop, (y - lo) + drop


def _split(x, y, t, E, Z):
    m, dx, dy = _minimum(x, y, t, E)
    s = Z * Z / E
    # 1 + s - sqrt(2s + s^2), written without cancellation
    g = 1.0 / (1.0 + s + np.sqrt(s * s + 2.0 * s))
    ratio = dy / dx
    tau1 = t / (1.0 + ratio * g)
    tau2 = t / (1.0 + ratio / g)
    p1 = (t * g * E + 2.0 * dx * dx) / ((1.0 + g) * (t * E + 2.0 * dx * dx))
    return m, dx, dy, g, tau1, tau2, p1


@dataclass
class RaggedLayout:
    """Index bookkeeping for a flat array of per-element point sequences."""

    counts: np.ndarray
    starts: np.ndarray
    owner: np.ndarray
    pos: np.ndarray
    groups: list = field(default_factory=list)
    big_points: np.ndarray | None = None
    big_elements: np.ndarray | None = None

    @classmethod
    def from_counts(cls, counts) -> "RaggedLayout":
        counts = np.asarray(counts, dtype=np.int64)
        starts = np.cumsum(counts) - counts
        owner = np.repeat(np.arange(counts.size), counts)
        pos = np.arange(owner.size) - starts[owner]
        groups = []
        # Points sharing a position belong to distinct elements, so fancy-indexed
        # updates of per-element accumulators inside one group never collide.
        if owner.size:
            order = np.argsort(pos, kind="stable")
            bounds = np.searchsorted(pos[order], np.arange(int(pos.max()) + 2))
            groups = [order[bounds[p] : bounds[p + 1]] for p in range(bounds.size - 1)]
        big_el = np.nonzero(counts > LOG_PRODUCT_THRESHOLD)[0]
        big_pts = np.nonzero(counts[owner] > LOG_PRODUCT_THRESHOLD)[0]
        return cls(counts, starts, owner, pos, groups, big_pts, big_el)

    @property
    def n_elements(self) -> int:
        return self.counts.size

    @property
    def n_points(self) -> int:
        return self.owner.size

    def previous_times(self, Y: np.ndarray) -> np.ndarray:
        prev = np.zeros_like(Y)
        has = self.pos > 0
        prev[has] = Y[np.nonzero(has)[0] - 1]
        return prev

    def product(self, factors: np.ndarray) -> np.ndarray:
        """Per-element product of ``factors`` (1 for elements without points)."""
        out = np.ones(self.n_elements)
        small = self.counts[self.owner] <= LOG_PRODUCT_THRESHOLD if self.big_points.size else None
        for g in self.groups:
            if small is not None:
                g = g[small[g]]
            out[self.owner[g]] *= factors[g]
        if self.big_points.size:
            with np.errstate(divide="ignore"):
                logs = np.log(factors[self.big_points])
            acc = np.bincount(self.owner[self.big_points], weights=logs, minlength=self.n_elements)
            out[self.big_elements] = np.exp(acc[self.big_elements])
        return out


def guard_tau(tau, t, Y, layout: RaggedLayout):
    """Move tau by TAU_SHIFT * t away from any Poisson time closer than TAU_GUARD * t."""
    if layout.n_points == 0:
        return tau
    te = tau[layout.owner]
    tt = t[layout.owner] if np.ndim(t) else t
    near = np.abs(te - Y) < TAU_GUARD * tt
    if not near.any():
        return tau
    tau = tau.copy()
    for k in np.nonzero(near)[0]:
        e = layout.owner[k]
        te_k = float(t[e] if np.ndim(t) else t)
        tau[e] += TAU_SHIFT * te_k if tau[e] >= Y[k] else -TAU_SHIFT * te_k
    return tau


def chi_kernel(m, dx, dy, t, tau, Y, Yprev, Ncols, layout: RaggedLayout) -> np.ndarray:
    """Bridge values at the Poisson times for minimum m attained at ``tau``.

    All per-element arguments are arrays indexed by element; ``Y``, ``Yprev``
    (previous point time, 0 for the first) and the columns of ``Ncols`` are
    flat arrays indexed by point.
    """
    n = layout.n_elements
    chi = np.empty(layout.n_points)
    s_pre = np.zeros((3, n))
    s_post = np.zeros((3, n))
    t = np.broadcast_to(t, (n,))
    with np.errstate(invalid="ignore", divide="ignore"):
        for g in layout.groups:
            e = layout.owner[g]
            yj, yp, te, tt = Y[g], Yprev[g], tau[e], t[e]
            pre = yj <= te
            c_pre = np.where(pre, np.sqrt((yj - yp) / ((te - yj) * (te - yp))), 0.0)
            lo = np.maximum(yp, te)
            c_post = np.where(pre, 0.0, np.sqrt((yj - lo) / ((tt - yj) * (tt - lo))))
            ng = Ncols[:, g]
            s_pre[:, e] += ng * c_pre
            s_post[:, e] += ng * c_post
            scale = np.where(pre, te - yj, tt - yj)
            S = np.where(pre, s_pre[:, e], s_post[:, e]) * scale
            beta = np.where(pre, dx[e] * (te - yj) / te, dy[e] * (yj - te) / (tt - te))
            chi[g] = m[e] + np.sqrt((beta + S[0]) ** 2 + S[1] ** 2 + S[2] ** 2)
    return chi


@njit(cache=True)
def _chi_ragged(m, dx, dy, t, tau, Y, Ncols, counts, starts, out):  # pragma: no cover - compiled
    # Loop form of chi_kernel (with guard_tau folded in) for large banks.
    for e in range(counts.size):
        c = counts[e]
        if c == 0:
            continue
        s0 = starts[e]
        te = tau[e]
        tt = t[e]
        for k in range(s0, s0 + c):
            if abs(te - Y[k]) < TAU_GUARD * tt:
                if te >= Y[k]:
                    te += TAU_SHIFT * tt
                else:
                    te -= TAU_SHIFT * tt
        a0 = a1 = a2 = 0.0
        b0 = b1 = b2 = 0.0
        yp = 0.0
        for k in range(s0, s0 + c):
            yj = Y[k]
            if yj <= te:
                cc = math.sqrt((yj - yp) / ((te - yj) * (te - yp)))
                a0 += Ncols[0, k] * cc
                a1 += Ncols[1, k] * cc
                a2 += Ncols[2, k] * cc
                sc = te - yj
                u0 = dx[e] * (te - yj) / te + a0 * sc
                u1 = a1 * sc
                u2 = a2 * sc
            else:
                lo = yp if yp > te else te
                cc = math.sqrt((yj - lo) / ((tt - yj) * (tt - lo)))
                b0 += Ncols[0, k] * cc
                b1 += Ncols[1, k] * cc
                b2 += Ncols[2, k] * cc
                sc = tt - yj
                u0 = dy[e] * (yj - te) / (tt - te) + b0 * sc
                u1 = b1 * sc
                u2 = b2 * sc
            out[k] = m[e] + math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
            yp = yj
    return out


@njit(cache=True)
def _mixed_products(f1, f2, p1, counts, starts, out):  # pragma: no cover - compiled
    # out[e] = p1 prod(f1) + (1 - p1) prod(f2) over the points of element e
    for e in range(counts.size):
        c = counts[e]
        s0 = starts[e]
        if c <= LOG_PRODUCT_THRESHOLD:
            q1 = 1.0
            q2 = 1.0
            for k in range(s0, s0 + c):
                q1 *= f1[k]
                q2 *= f2[k]
        else:
            l1 = 0.0
            l2 = 0.0
            for k in range(s0, s0 + c):
                l1 += math.log(f1[k]) if f1[k] > 0.0 else -math.inf
                l2 += math.log(f2[k]) if f2[k] > 0.0 else -math.inf
            q1 = math.exp(l1)
            q2 = math.exp(l2)
        out[e] = p1[e] * q1 + (1.0 - p1[e]) * q2
    return out


def chi_ragged(m, dx, dy, t, tau, Y, Ncols, layout: RaggedLayout) -> np.ndarray:
    """Compiled equivalent of ``guard_tau`` followed by ``chi_kernel``."""
    t = np.ascontiguousarray(np.broadcast_to(np.asarray(t, dtype=float), m.shape))
    out = np.empty(layout.n_points)
    return _chi_ragged(m, dx, dy, t, np.asarray(tau, dtype=float), Y, Ncols, layout.counts, layout.starts, out)


def mixed_products(f1, f2, p1, layout: RaggedLayout) -> np.ndarray:
    return _mixed_products(f1, f2, p1, layout.counts, layout.starts, np.empty(layout.n_elements))


# -- single-element API -------------------------------------------------------


def sample_minimum(frame: BridgeFrame, E: float) -> float:
    """Minimum of the bridge given the exponential driver E > 0."""
    if not E > 0:
        raise DegenerateInputError("E must be positive")
    return float(_minimum(frame.x, frame.y, frame.t, E)[0])


def split_at_minimum(frame: BridgeFrame, E: float, Z: float) -> MinSplit:
    if not E > 0:
        raise DegenerateInputError("E must be positive")
    m, dx, dy, g, tau1, tau2, p1 = (float(v) for v in _split(frame.x, frame.y, frame.t, E, Z))
    return MinSplit(E=float(E), m=m, g=g, tau1=tau1, tau2=tau2, p1=p1, p2=1.0 - p1, dx=dx, dy=dy)


def sample_tau(split: MinSplit, V: float) -> float:
    return split.tau1 if V <= split.p1 else split.tau2


def bb_discrete(s, N) -> np.ndarray:
    """Standard Brownian bridge (0,0)->(1,0) at sorted times ``s`` driven by normals ``N``."""
    s = np.asarray(s, dtype=float)
    N = np.asarray(N, dtype=float)
    if s.shape != N.shape or s.ndim != 1:
        raise ValueError("times and normals must be 1-d of equal length")
    if s.size == 0:
        return np.zeros(0)
    if s[0] <= 0 or s[-1] >= 1 or np.any(np.diff(s) <= 0):
        raise ValueError("times must be strictly increasing inside (0, 1)")
    prev = np.concatenate([[0.0], s[:-1]])
    coef = np.sqrt((s - prev) / ((1.0 - prev) * (1.0 - s)))
    return (1.0 - s) * np.cumsum(N * coef)


def _check_times(Y, t):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 1:
        raise ValueError("Poisson times must be 1-d")
    if Y.size and (Y[0] <= 0 or Y[-1] >= t or np.any(np.diff(Y) <= 0)):
        raise ValueError("Poisson times must be strictly increasing inside (0, t)")
    return Y


def chi_values(frame: BridgeFrame, split: MinSplit, Y, Nmat, branch: int) -> np.ndarray:
    """Bridge skeleton at times ``Y`` for minimum attained at tau_branch (branch 1 or 2)."""
    if branch not in (1, 2):
        raise ValueError("branch must be 1 or 2")
    Y = _check_times(Y, frame.t)
    Nmat = np.asarray(Nmat, dtype=float).reshape(3, -1)
    if Nmat.shape[1] != Y.size:
        raise ValueError("Nmat must be 3 x len(Y)")
    if Y.size == 0:
        return np.zeros(0)
    tau = split.taus[branch - 1]
    if np.any(np.abs(tau - Y) < TAU_GUARD * frame.t):
        raise DegenerateInputError("a Poisson time coincides with the minimum time")
    layout = RaggedLayout.from_counts([Y.size])
    one = lambda v: np.array([v], dtype=float)  # noqa: E731
    return chi_kernel(
        one(split.m), one(split.dx), one(split.dy), one(frame.t), one(tau),
        Y, layout.previous_times(Y), Nmat, layout,
    )


# -- proposals: EA and AM -----------------------------------------------------


@dataclass
class ProposalBatch:
    """One Brownian-bridge proposal per replicate, with its acceptance weight."""

    replicates: np.ndarray
    m: np.ndarray
    tau: np.ndarray
    rate: np.ndarray
    layout: RaggedLayout
    Y: np.ndarray
    chi: np.ndarray
    weight: np.ndarray
    accept_u: np.ndarray


def propose(
    model: TransformedModel,
    theta,
    frame: BridgeFrame,
    seed: int,
    replicates,
    attempt=0,
    rate_factor: float = 1.0,
    interval: int = 1,
) -> ProposalBatch:
    """Draw proposals with minimum-based Poisson rate ``rate_factor * r(m, theta)``.

    Replicate j at attempt a reads counters in block a of the key
    (seed, interval, j, purpose), so proposals are reproducible one by one.
    """
    theta = np.asarray(theta, dtype=float)
    reps = np.atleast_1d(np.asarray(replicates, dtype=np.int64))
    base = np.broadcast_to(np.asarray(attempt, dtype=np.uint64) << np.uint64(ATTEMPT_SHIFT), reps.shape)
    keys = {p: key_hash(seed, interval, reps, int(p)) for p in Purpose}
    x, y, t = frame.x, frame.y, frame.t

    E = exponentials(keys[Purpose.EXPONENTIAL], base)
    Z = normals(keys[Purpose.GAUSSIAN_Z], base)
    V = uniforms(keys[Purpose.TAU_UNIFORM], base)
    m, dx, dy, g, tau1, tau2, p1 = _split(x, y, t, E, Z)
    tau = np.where(V <= p1, tau1, tau2)
    rate = rate_factor * np.asarray(model.r(m, theta), dtype=float)
    counts = poisson_counts(keys[Purpose.POISSON_COUNT], rate * t, base)
    Y = poisson_times(keys[Purpose.POISSON_TIMES], counts, t, base)
    Ncols = gaussian_columns(keys[Purpose.GAUSSIAN_MATRIX], counts, base)
    layout = RaggedLayout.from_counts(counts)
    tau = guard_tau(tau, np.full(reps.shape, t), Y, layout)
    chi = chi_kernel(m, dx, dy, np.full(reps.shape, t), tau, Y, layout.previous_times(Y), Ncols, layout)
    factors = 1.0 - np.asarray(model.phi(chi, theta)) / rate[layout.owner] if chi.size else chi
    weight = layout.product(factors)
    U = uniforms(keys[Purpose.ACCEPT_UNIFORM], base)
    return ProposalBatch(reps, m, tau, rate, layout, Y, chi, weight, U)


def am_batch(model, theta, frame, seed, replicates, rate_factor: float = 1.0, interval: int = 1) -> np.ndarray:
    """Pointwise unbiased estimates of the acceptance probability, one per replicate."""
    if rate_factor < 1.0:
        raise ValueError("thinning needs a dominating rate (rate_factor >= 1)")
    return propose(model, theta, frame, seed, replicates, 0, rate_factor, interval).weight


def am_pointwise(model, theta, frame: BridgeFrame, key: StreamKey, rate_factor: float = 1.0) -> float:
    return float(
        am_batch(model, theta, frame, key.experiment_seed, [key.replicate_index], rate_factor, key.interval_index)[0]
    )


def ea_batch(
    model, theta, frame, seed, replicates, interval: int = 1, max_proposals: int = 10**6
) -> tuple[np.ndarray, np.ndarray]:
    """Run the exact algorithm for every replicate; returns (accepting attempt, proposals used)."""
    reps = np.atleast_1d(np.asarray(replicates, dtype=np.int64))
    accepted_at = np.full(reps.shape, -1, dtype=np.int64)
    todo = np.arange(reps.size)
    attempt = 0
    while todo.size:
        if attempt >= max_proposals:
            raise IterationCapError(
                f"{todo.size} bridge(s) still unaccepted after {max_proposals} proposals"
            )
        batch = propose(model, theta, frame, seed, reps[todo], attempt, 1.0, interval)
        ok = batch.accept_u < batch.weight
        accepted_at[todo[ok]] = attempt
        todo = todo[~ok]
        attempt += 1
    return accepted_at, accepted_at + 1


def ea_bridge_sampler(
    model: TransformedModel, theta, frame: BridgeFrame, key: StreamKey, max_proposals: int = 10**6
) -> tuple[PathSkeleton, int]:
    """Exact draw of the diffusion bridge skeleton at Poisson times, plus proposals consumed."""
    running = 0.0
    for attempt in range(max_proposals):
        b = propose(model, theta, frame, key.experiment_seed, [key.replicate_index], attempt, 1.0, key.interval_index)
        running += float(b.weight[0])
        if b.accept_u[0] < b.weight[0]:
            skel = PathSkeleton(b.Y.copy(), b.chi.copy(), float(b.m[0]), float(b.tau[0]), frame)
            return skel, attempt + 1
    raise IterationCapError(
        f"no acceptance in {max_proposals} proposals (mean acceptance weight {running / max_proposals:.3g})"
    )
