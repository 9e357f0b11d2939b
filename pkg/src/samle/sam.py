"""Simultaneous acceptance estimator of transition densities and likelihoods.

A random element Xi = (E, Poisson times, Z, 3 x Lambda normals) is drawn once
per (interval, replicate) without reference to theta.  For any theta in the
box, ``L(Xi, theta)`` is an unbiased estimate of the transition density and
is continuous in theta, so one bank of elements yields a whole Monte Carlo
likelihood surface on common random numbers.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .bridge import RaggedLayout, _split, chi_ragged, mixed_products
from .models import ParameterBox, TransformedModel
from .rng import Purpose, StreamKey, exponentials, gaussian_columns, key_hash, normals, poisson_counts, poisson_times

logger = logging.getLogger(__name__)

__all__ = [
    "DominanceError",
    "XiElement",
    "XiBank",
    "LikelihoodSurface",
    "generate_xi",
    "generate_bank",
    "eval_L",
    "eval_LN",
    "eval_loglik",
    "fd_gradient",
    "fd_hessian",
    "estimate_An",
    "default_steps",
]

DOMINANCE_TOL = 1e-9


class DominanceError(RuntimeError):
    """The stored Poisson rate is below r(m(E, theta), theta): the rate hook is broken."""


@dataclass
class XiElement:
    E: float
    Z: float
    lam: float
    Y: np.ndarray
    Nmat: np.ndarray

    @property
    def count(self) -> int:
        return int(self.Y.size)


@dataclass
class _Draws:
    """Struct-of-arrays store for many elements; points are ragged per element."""

    E: np.ndarray
    Z: np.ndarray
    lam: np.ndarray
    counts: np.ndarray
    Y: np.ndarray
    Ncols: np.ndarray

    def select(self, idx: np.ndarray) -> "_Draws":
        starts = np.cumsum(self.counts) - self.counts
        c = self.counts[idx]
        owner = np.repeat(np.arange(idx.size), c)
        pts = starts[idx][owner] + (np.arange(owner.size) - (np.cumsum(c) - c)[owner])
        return _Draws(self.E[idx], self.Z[idx], self.lam[idx], c, self.Y[pts], self.Ncols[:, pts])

    @staticmethod
    def concat(parts: list["_Draws"]) -> "_Draws":
        return _Draws(
            np.concatenate([p.E for p in parts]),
            np.concatenate([p.Z for p in parts]),
            np.concatenate([p.lam for p in parts]),
            np.concatenate([p.counts for p in parts]),
            np.concatenate([p.Y for p in parts]),
            np.concatenate([p.Ncols for p in parts], axis=1),
        )


def _generate(model, box, v, w, t, seed, intervals, replicates) -> _Draws:
    """Draw elements for parallel arrays of (v, w, t, interval index, replicate index)."""
    kE, kZ, kC, kT, kG = (
        key_hash(seed, intervals, replicates, int(p))
        for p in (
            Purpose.EXPONENTIAL,
            Purpose.GAUSSIAN_Z,
            Purpose.POISSON_COUNT,
            Purpose.POISSON_TIMES,
            Purpose.GAUSSIAN_MATRIX,
        )
    )
    E = exponentials(kE, 0)
    lam = np.asarray(model.lambda_bound(E, v, w, t, box), dtype=float)
    lam = np.broadcast_to(lam, E.shape).copy()
    counts = poisson_counts(kC, lam * t)
    Y = poisson_times(kT, counts, t)
    Z = normals(kZ, 0)
    Ncols = gaussian_columns(kG, counts)
    return _Draws(E, Z, lam, counts, Y, Ncols)


@dataclass
class XiBank:
    """N independent elements attached to the observed interval (v, w, t)."""

    interval_index: int
    v: float
    w: float
    t: float
    draws: _Draws

    def __len__(self) -> int:
        return self.draws.E.size

    @property
    def N(self) -> int:
        return len(self)

    def element(self, j: int) -> XiElement:
        """Element with replicate index j (1-based)."""
        d = self.draws
        start = int(d.counts[: j - 1].sum())
        c = int(d.counts[j - 1])
        return XiElement(float(d.E[j - 1]), float(d.Z[j - 1]), float(d.lam[j - 1]),
                         d.Y[start : start + c].copy(), d.Ncols[:, start : start + c].copy())

    @property
    def elements(self) -> list[XiElement]:
        return [self.element(j) for j in range(1, len(self) + 1)]

    def prefix(self, N: int) -> "XiBank":
        if not 1 <= N <= len(self):
            raise ValueError(f"prefix size {N} outside 1..{len(self)}")
        return XiBank(self.interval_index, self.v, self.w, self.t, self.draws.select(np.arange(N)))

    def concat(self, other: "XiBank") -> "XiBank":
        return XiBank(self.interval_index, self.v, self.w, self.t, _Draws.concat([self.draws, other.draws]))


def generate_xi(model: TransformedModel, box: ParameterBox, interval, key: StreamKey) -> XiElement:
    """One random element for interval (v, w, t); bit-identical to the bank entry with the same key."""
    v, w, t = (float(a) for a in interval)
    model.check_state(v, w)
    if not t > 0:
        raise ValueError("interval duration must be positive")
    d = _generate(model, box, np.array([v]), np.array([w]), np.array([t]),
                  key.experiment_seed, np.array([key.interval_index]), np.array([key.replicate_index]))
    return XiElement(float(d.E[0]), float(d.Z[0]), float(d.lam[0]), d.Y, d.Ncols)


def generate_bank(model, box, interval, seed: int, N: int, interval_index: int = 1) -> XiBank:
    v, w, t = (float(a) for a in interval)
    model.check_state(v, w)
    if N < 1:
        raise ValueError("bank size must be >= 1")
    j = np.arange(1, N + 1)
    d = _generate(model, box, np.full(N, v), np.full(N, w), np.full(N, t), seed, np.full(N, interval_index), j)
    return XiBank(interval_index, v, w, t, d)


# -- evaluation ---------------------------------------------------------------


def _acceptance_values(model, theta, x, y, t, draws: _Draws, layout: RaggedLayout, check: bool = True):
    """a(Xi, theta) for every element; x, y, t are per-element arrays."""
    m, dx, dy, _, tau1, tau2, p1 = _split(x, y, t, draws.E, draws.Z)
    lam = draws.lam
    if check:
        r = np.asarray(model.r(m, theta), dtype=float)
        excess = r - lam
        if np.any(excess > DOMINANCE_TOL * np.maximum(1.0, lam)):
            k = int(np.argmax(excess))
            raise DominanceError(f"lambda {lam[k]:.6g} < r(m, theta) {r[k]:.6g} at theta={theta}")
    if layout.n_points == 0:
        return np.ones_like(m)
    lam_pts = lam[layout.owner]
    f1, f2 = (
        1.0 - np.asarray(model.phi(chi_ragged(m, dx, dy, t, tau, draws.Y, draws.Ncols, layout), theta)) / lam_pts
        for tau in (tau1, tau2)
    )
    return mixed_products(f1, f2, p1, layout)


def _check_theta(box: ParameterBox | None, theta):
    theta = np.asarray(theta, dtype=float)
    if box is not None and not box.contains(theta, tol=1e-12):
        raise ValueError(f"theta {theta} outside the parameter box [{box}]")
    return theta


def eval_L(xi: XiElement, theta, interval, model: TransformedModel, box: ParameterBox | None = None) -> float:
    """L(Xi, theta): unbiased estimate of p_t(v, w; theta) from one element."""
    theta = _check_theta(box, theta)
    v, w, t = (float(a) for a in interval)
    d = _Draws(np.array([xi.E]), np.array([xi.Z]), np.array([xi.lam]), np.array([xi.count]),
               np.asarray(xi.Y, dtype=float), np.asarray(xi.Nmat, dtype=float).reshape(3, -1))
    layout = RaggedLayout.from_counts(d.counts)
    x = np.array([model.eta(v, theta)], dtype=float)
    y = np.array([model.eta(w, theta)], dtype=float)
    a = _acceptance_values(model, theta, x, y, np.array([t]), d, layout)
    return float(np.exp(model.log_prefactor(v, w, t, theta)) * a[0])


class LikelihoodSurface:
    """Monte Carlo log-likelihood over fixed banks, one bank per observed interval.

    Evaluation at any theta is deterministic given the banks.  Calling the
    surface returns the log-likelihood, or ``-inf`` when some interval average
    is not positive.
    """

    def __init__(self, model: TransformedModel, box: ParameterBox, banks: list[XiBank], seed: int | None = None):
        if not banks:
            raise ValueError("need at least one bank")
        problems = model.box_problems(box)
        if problems:
            raise ValueError("; ".join(problems))
        self.model = model
        self.box = box
        self.banks = banks
        self.seed = seed
        self.v = np.array([b.v for b in banks])
        self.w = np.array([b.w for b in banks])
        self.t = np.array([b.t for b in banks])
        self.sizes = np.array([len(b) for b in banks])
        self.bank_starts = np.cumsum(self.sizes) - self.sizes
        self.elem_interval = np.repeat(np.arange(len(banks)), self.sizes)
        self.draws = _Draws.concat([b.draws for b in banks])
        self.layout = RaggedLayout.from_counts(self.draws.counts)
        self.n_evals = 0

    @classmethod
    def build(cls, model, box, v, w, t, seed: int, N: int, cache_dir: str | Path | None = None) -> "LikelihoodSurface":
        """Generate banks for all intervals at once: element (i, j) uses key (seed, i, j, .)."""
        v = np.asarray(v, dtype=float)
        w = np.asarray(w, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), v.shape)
        model.check_state(v, w)
        if np.any(t <= 0):
            raise ValueError("interval durations must be positive")
        if N < 1:
            raise ValueError("bank size must be >= 1")
        cache = None
        if cache_dir is not None:
            digest = hashlib.sha256()
            for part in (model.name, str(box), str(seed), str(N)):
                digest.update(part.encode())
            for arr in (v, w, t):
                digest.update(np.ascontiguousarray(arr).tobytes())
            cache = Path(cache_dir) / f"bank-{digest.hexdigest()[:24]}.npz"
            if cache.exists():
                return cls.load(model, box, cache)
        n = v.size
        iv = np.repeat(np.arange(n), N)
        jv = np.tile(np.arange(1, N + 1), n)
        d = _generate(model, box, v[iv], w[iv], t[iv], seed, iv + 1, jv)
        surface = cls._from_draws(model, box, v, w, t, d, np.full(n, N), seed)
        if cache is not None:
            surface.save(cache)
        return surface

    @classmethod
    def _from_draws(cls, model, box, v, w, t, d: _Draws, sizes, seed):
        starts = np.cumsum(sizes) - sizes
        banks = [
            XiBank(i + 1, float(v[i]), float(w[i]), float(t[i]), d.select(np.arange(s, s + k)))
            for i, (s, k) in enumerate(zip(starts, sizes))
        ]
        return cls(model, box, banks, seed)

    def save(self, path) -> None:
        d = self.draws
        np.savez(path, v=self.v, w=self.w, t=self.t, sizes=self.sizes, E=d.E, Z=d.Z, lam=d.lam,
                 counts=d.counts, Y=d.Y, Ncols=d.Ncols, seed="" if self.seed is None else str(self.seed))

    @classmethod
    def load(cls, model, box, path) -> "LikelihoodSurface":
        with np.load(path) as z:
            d = _Draws(z["E"], z["Z"], z["lam"], z["counts"], z["Y"], z["Ncols"])
            seed = str(z["seed"])
            return cls._from_draws(model, box, z["v"], z["w"], z["t"], d, z["sizes"], int(seed) if seed else None)

    @property
    def n(self) -> int:
        return len(self.banks)

    @property
    def N(self) -> int:
        return int(self.sizes.min())

    def prefix(self, N: int) -> "LikelihoodSurface":
        """Surface on the first N elements of every bank (nested common random numbers)."""
        return LikelihoodSurface(self.model, self.box, [b.prefix(N) for b in self.banks], self.seed)

    def acceptance_values(self, theta) -> np.ndarray:
        theta = _check_theta(self.box, theta)
        x = self.model.eta(self.v, theta)[self.elem_interval]
        y = self.model.eta(self.w, theta)[self.elem_interval]
        t = self.t[self.elem_interval]
        return _acceptance_values(self.model, theta, x, y, t, self.draws, self.layout)

    def element_values(self, theta) -> np.ndarray:
        """L(Xi_i^j, theta) for every element, in bank order."""
        a = self.acceptance_values(theta)
        logpref = self.model.log_prefactor(self.v, self.w, self.t, theta)
        return np.exp(logpref)[self.elem_interval] * a

    def log_interval_averages(self, theta) -> np.ndarray:
        """log L_i^N(theta) for every interval."""
        a = self.acceptance_values(theta)
        mean_a = np.add.reduceat(a, self.bank_starts) / self.sizes
        logpref = self.model.log_prefactor(self.v, self.w, self.t, np.asarray(theta, dtype=float))
        with np.errstate(divide="ignore"):
            return logpref + np.log(np.where(mean_a > 0, mean_a, 0.0))

    def loglik(self, theta) -> float:
        self.n_evals += 1
        val = float(np.sum(self.log_interval_averages(theta)))
        return val if np.isfinite(val) else -np.inf

    __call__ = loglik


def eval_LN(bank: XiBank, theta, model: TransformedModel, box: ParameterBox | None = None) -> float:
    """Arithmetic mean of L(Xi^j, theta) over the bank."""
    if len(bank) == 0:
        raise ValueError("empty bank")
    theta = _check_theta(box, theta)
    d = bank.draws
    layout = RaggedLayout.from_counts(d.counts)
    N = len(bank)
    x = np.full(N, model.eta(bank.v, theta), dtype=float)
    y = np.full(N, model.eta(bank.w, theta), dtype=float)
    a = _acceptance_values(model, theta, x, y, np.full(N, bank.t), d, layout)
    return float(np.exp(model.log_prefactor(bank.v, bank.w, bank.t, theta)) * a.mean())


def eval_loglik(surface: LikelihoodSurface, theta) -> float:
    return surface.loglik(theta)


# -- finite differences on common random numbers ------------------------------


def default_steps(box: ParameterBox) -> np.ndarray:
    return 1e-4 * box.width


def _steps(f, theta, h, box):
    box = box if box is not None else getattr(f, "box", None)
    if h is None:
        if box is None:
            raise ValueError("need a step vector or a box to derive one")
        h = default_steps(box)
    h = np.broadcast_to(np.asarray(h, dtype=float), theta.shape).copy()
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    if box is not None and (np.any(theta - h < box.lower) or np.any(theta + h > box.upper)):
        raise ValueError(f"finite-difference stencil at {theta} leaves the box [{box}]")
    return h


def fd_gradient(f: Callable, theta, h=None, box: ParameterBox | None = None) -> np.ndarray:
    """Central-difference gradient of ``f`` (a surface or any callable)."""
    theta = np.asarray(theta, dtype=float)
    h = _steps(f, theta, h, box)
    g = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h[k]
        g[k] = (f(theta + e) - f(theta - e)) / (2.0 * h[k])
    return g


def fd_hessian(f: Callable, theta, h=None, box: ParameterBox | None = None, f0: float | None = None) -> np.ndarray:
    """Central-difference Hessian, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    h = _steps(f, theta, h, box)
    d = theta.size
    f0 = f(theta) if f0 is None else f0
    H = np.empty((d, d))
    E = np.diag(h)
    for k in range(d):
        H[k, k] = (f(theta + E[k]) - 2.0 * f0 + f(theta - E[k])) / h[k] ** 2
        for j in range(k + 1, d):
            H[k, j] = (
                f(theta + E[k] + E[j]) - f(theta + E[k] - E[j]) - f(theta - E[k] + E[j]) + f(theta - E[k] - E[j])
            ) / (4.0 * h[k] * h[j])
            H[j, k] = H[k, j]
    return 0.5 * (H + H.T)


def estimate_An(surface: LikelihoodSurface, theta, h=None) -> np.ndarray:
    """Sum over intervals of the per-element covariance of grad(L(Xi, theta) / L(theta)).

    grad L(Xi, .) is taken by central differences on each element and L(theta)
    is replaced by the bank average.
    """
    theta = np.asarray(theta, dtype=float)
    h = _steps(surface, theta, h, surface.box)
    if np.any(surface.sizes < 2):
        raise ValueError("need banks of size >= 2")
    d = theta.size
    L0 = surface.element_values(theta)
    grads = np.empty((d, L0.size))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h[k]
        grads[k] = (surface.element_values(theta + e) - surface.element_values(theta - e)) / (2.0 * h[k])
    starts, sizes, owner = surface.bank_starts, surface.sizes, surface.elem_interval
    LN = (np.add.reduceat(L0, starts) / sizes)[owner]
    gN = (np.add.reduceat(grads, starts, axis=1) / sizes)[:, owner]
    s = grads / LN - L0 * gN / LN**2
    # s has mean exactly zero within each interval, so this is the sample covariance
    w = 1.0 / (sizes[owner] - 1.0)
    A = (s * w) @ s.T
    A = 0.5 * (A + A.T)
    rank = np.linalg.matrix_rank(A) if np.any(A) else 0
    if rank < d and np.any(A):
        logger.warning("A_n estimate has rank %d < %d", rank, d)
    return A
