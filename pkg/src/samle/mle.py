"""Monte Carlo maximum likelihood: box-constrained Nelder-Mead and variance estimates.

The optimiser works on any callable ``f(theta) -> loglik`` that carries a
``box`` attribute (or is given one).  ``-inf`` is the "cannot evaluate"
flag and ranks below every finite value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .models import ParameterBox
from .sam import LikelihoodSurface, estimate_An, fd_hessian

__all__ = [
    "NoProgressError",
    "default_eps",
    "SimplexConfig",
    "TraceEntry",
    "MLEResult",
    "nelder_mead",
    "maximize",
    "observed_information",
    "warm_start_ladder",
    "profile",
]

logger = logging.getLogger(__name__)

# reflection, expansion, contraction, shrink
NM_COEFFS = (1.0, 2.0, 0.5, 0.5)
RESTART_FRACTION = 0.1


class NoProgressError(RuntimeError):
    """Every vertex of the simplex evaluated to -inf."""


def default_eps(N: int) -> float:
    """Simplex-diameter tolerance, as a fraction of each box width."""
    return max(1e-8, 0.01 / math.sqrt(max(int(N), 1)))


@dataclass
class SimplexConfig:
    initial_point: np.ndarray
    initial_scale: float | np.ndarray = 0.1
    eps_schedule: Callable[[int], float] = default_eps
    max_evals: int = 4000
    restart: bool = True

    def __post_init__(self):
        self.initial_point = np.asarray(self.initial_point, dtype=float)
        if np.any(np.asarray(self.initial_scale) <= 0):
            raise ValueError("initial_scale must be positive")
        if self.max_evals < 1:
            raise ValueError("max_evals must be positive")

    def eps(self, N: int) -> float:
        return float(self.eps_schedule(N))


@dataclass(frozen=True)
class TraceEntry:
    eval_index: int
    theta: tuple[float, ...]
    loglik: float


@dataclass
class MLEResult:
    theta_hat: np.ndarray
    loglik: float
    eps_used: float
    N: int
    se_obs: np.ndarray
    Bn: np.ndarray
    An: np.ndarray | None
    sandwich: np.ndarray | None
    trace: list[TraceEntry] = field(default_factory=list)
    n_evals: int = 0
    notes: list[str] = field(default_factory=list)

    def as_dict(self, names: Sequence[str] | None = None) -> dict[str, float | int | str]:
        names = list(names) if names is not None else [f"theta{k}" for k in range(self.theta_hat.size)]
        out: dict[str, float | int | str] = {"N": self.N, "eps": self.eps_used, "loglik": self.loglik}
        for k, nm in enumerate(names):
            out[nm] = float(self.theta_hat[k])
        for k, nm in enumerate(names):
            out[f"se_{nm}"] = float(self.se_obs[k])
        if self.sandwich is not None:
            for k, nm in enumerate(names):
                out[f"mcse_{nm}"] = float(math.sqrt(max(self.sandwich[k, k], 0.0)))
        out["n_evals"] = self.n_evals
        out["notes"] = "|".join(self.notes)
        return out

    def trace_rows(self) -> list[tuple]:
        return [(e.eval_index, *e.theta, e.loglik) for e in self.trace]


class _Objective:
    """Wraps f with box folding, the evaluation trace and the eval budget."""

    def __init__(self, f, box: ParameterBox, trace: list[TraceEntry]):
        self.f = f
        self.box = box
        self.trace = trace

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        x = self.box.fold(x)
        val = float(self.f(x))
        if not np.isfinite(val):
            val = -math.inf
        self.trace.append(TraceEntry(len(self.trace) + 1, tuple(float(v) for v in x), val))
        return x, val


def _diameter(simplex: np.ndarray, width: np.ndarray) -> float:
    return float(np.max(np.abs(simplex[1:] - simplex[0]) / width)) if len(simplex) > 1 else 0.0


def _initial_simplex(x0, scale, box: ParameterBox) -> np.ndarray:
    d = x0.size
    steps = np.broadcast_to(np.asarray(scale, dtype=float), (d,)) * box.width
    simplex = [x0]
    for k in range(d):
        v = x0.copy()
        # step towards the interior side with more room, so the vertex stays distinct
        sign = 1.0 if box.upper[k] - x0[k] >= x0[k] - box.lower[k] else -1.0
        v[k] += sign * min(steps[k], box.width[k])
        simplex.append(v)
    return np.array(simplex)


def _run_simplex(obj: _Objective, x0, scale, tol: float, budget: int) -> tuple[np.ndarray, float, bool]:
    """One Nelder-Mead pass maximising obj; returns (best, value, converged)."""
    alpha, gamma, rho, shrink = NM_COEFFS
    box = obj.box
    width = box.width
    start = len(obj.trace)
    verts = []
    vals = []
    for v in _initial_simplex(box.fold(x0), scale, box):
        p, fv = obj(v)
        verts.append(p)
        vals.append(fv)
    verts = np.array(verts)
    vals = np.array(vals)
    if np.all(vals == -math.inf):
        raise NoProgressError("every simplex vertex evaluated to -inf")
    d = verts.shape[1]
    converged = False
    while len(obj.trace) - start < budget:
        # sort best (largest loglik) first; stable so ties keep insertion order
        order = np.argsort(-vals, kind="stable")
        verts, vals = verts[order], vals[order]
        if _diameter(verts, width) < tol:
            converged = True
            break
        centroid = verts[:-1].mean(axis=0)
        worst = verts[-1]
        xr, fr = obj(centroid + alpha * (centroid - worst))
        if fr > vals[0]:
            xe, fe = obj(centroid + gamma * (centroid - worst))
            if fe > fr:
                verts[-1], vals[-1] = xe, fe
            else:
                verts[-1], vals[-1] = xr, fr
            continue
        if fr > vals[-2]:
            verts[-1], vals[-1] = xr, fr
            continue
        if fr > vals[-1]:
            xc, fc = obj(centroid + rho * (xr - centroid))
            if fc >= fr:
                verts[-1], vals[-1] = xc, fc
                continue
        else:
            xc, fc = obj(centroid + rho * (worst - centroid))
            if fc > vals[-1]:
                verts[-1], vals[-1] = xc, fc
                continue
        for k in range(1, d + 1):
            verts[k], vals[k] = obj(verts[0] + shrink * (verts[k] - verts[0]))
    best = int(np.argmax(vals))
    return verts[best].copy(), float(vals[best]), converged


def nelder_mead(f, box: ParameterBox, x0, scale=0.1, tol: float = 1e-6, max_evals: int = 4000,
                restart: bool = True, trace: list[TraceEntry] | None = None):
    """Maximise f over the box; returns (theta, value, trace, notes)."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (box.d,):
        raise ValueError(f"initial point has shape {x0.shape}, box has dimension {box.d}")
    if not box.contains(x0, tol=1e-12):
        raise ValueError(f"initial point {x0} outside the box [{box}]")
    trace = [] if trace is None else trace
    notes: list[str] = []
    obj = _Objective(f, box, trace)
    x, fx, ok = _run_simplex(obj, x0, scale, tol, max_evals)
    if ok and restart:
        left = max_evals - len(trace)
        if left > box.d + 1:
            x2, f2, ok = _run_simplex(obj, x, RESTART_FRACTION * np.asarray(scale, dtype=float), tol, left)
            if f2 >= fx:
                x, fx = x2, f2
    if not ok:
        notes.append(f"max_evals={max_evals} reached before the simplex diameter fell below {tol:g}")
        logger.warning(notes[-1])
    # the returned point is the best evaluated one, so the epsilon-maximiser contract is exact
    best = max(trace, key=lambda e: e.loglik)
    if best.loglik > fx:
        x, fx = np.array(best.theta), best.loglik
    return x, fx, trace, notes


def _safe_steps(theta, box: ParameterBox) -> np.ndarray | None:
    room = np.minimum(theta - box.lower, box.upper - theta)
    h = np.minimum(1e-4 * box.width, 0.5 * room)
    return None if np.any(h <= 1e-12 * box.width) else h


def observed_information(f, theta, box: ParameterBox, f0: float | None = None):
    """(B_n, se_obs, step) by central differences; NaN when theta sits on a wall."""
    d = box.d
    h = _safe_steps(theta, box)
    if h is None:
        return np.full((d, d), np.nan), np.full(d, np.nan), None
    B = -fd_hessian(f, theta, h=h, box=box, f0=f0)
    se = np.full(d, np.nan)
    try:
        np.linalg.cholesky(B)
        se = np.sqrt(np.diag(np.linalg.inv(B)))
    except np.linalg.LinAlgError:
        pass
    return B, se, h


def maximize(surface, config: SimplexConfig, N: int | None = None, box: ParameterBox | None = None,
             information: bool = True) -> MLEResult:
    """epsilon^(N)-maximiser of a log-likelihood surface, with variance estimates."""
    box = box if box is not None else getattr(surface, "box", None)
    if box is None:
        raise ValueError("need a parameter box")
    if N is None:
        N = int(getattr(surface, "N", 1))
    eps = config.eps(N)
    counter0 = getattr(surface, "n_evals", None)
    theta, val, trace, notes = nelder_mead(
        surface, box, config.initial_point, config.initial_scale, eps, config.max_evals, config.restart
    )
    d = box.d
    Bn, se, An, sandwich = np.full((d, d), np.nan), np.full(d, np.nan), None, None
    if information:
        Bn, se, h = observed_information(surface, theta, box, f0=val)
        if h is None:
            notes.append("maximiser on the box boundary; no curvature estimate")
        elif not np.all(np.isfinite(se)):
            notes.append("observed information not positive definite")
        if h is not None and isinstance(surface, LikelihoodSurface) and surface.N >= 2:
            An = estimate_An(surface, theta, h=h)
            if np.all(np.isfinite(se)):
                Binv = np.linalg.inv(Bn)
                sandwich = Binv @ An @ Binv / N
    n_evals = len(trace) if counter0 is None else surface.n_evals - counter0
    return MLEResult(theta, val, eps, N, se, Bn, An, sandwich, trace, n_evals, notes)


def warm_start_ladder(surface_builder, Ns: Sequence[int], config: SimplexConfig,
                      information: bool = True) -> list[MLEResult]:
    """maximize for each N in turn, starting each search at the previous maximiser.

    ``surface_builder`` is either a callable N -> surface or a LikelihoodSurface
    whose banks are cut to their first N elements.
    """
    Ns = [int(n) for n in Ns]
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 1:
        raise ValueError("Ns must be a strictly increasing sequence of positive integers")
    if isinstance(surface_builder, LikelihoodSurface):
        full = surface_builder
        if full.N < Ns[-1]:
            raise ValueError(f"surface has N={full.N} < {Ns[-1]}")
        build = lambda N: full if N == full.N else full.prefix(N)  # noqa: E731
    else:
        build = surface_builder
    results = []
    cfg = config
    for N in Ns:
        res = maximize(build(N), cfg, N=N, information=information)
        results.append(res)
        cfg = replace(cfg, initial_point=res.theta_hat)
    return results


def profile(surface, coord: int, grid, config: SimplexConfig, box: ParameterBox | None = None):
    """Rows (value, theta maximising the rest, profile loglik) along a grid for one coordinate."""
    box = box if box is not None else surface.box
    grid = np.asarray(grid, dtype=float)
    if not 0 <= coord < box.d:
        raise ValueError(f"coordinate {coord} out of range for dimension {box.d}")
    if np.any(grid < box.lower[coord]) or np.any(grid > box.upper[coord]):
        raise ValueError("profile grid leaves the box")
    rest = [k for k in range(box.d) if k != coord]
    sub_box = ParameterBox(box.lower[rest], box.upper[rest]) if rest else None
    N = int(getattr(surface, "N", 1))
    start = box.fold(config.initial_point)[rest]
    scale = np.broadcast_to(np.asarray(config.initial_scale, dtype=float), (box.d,))[rest] if rest else None
    rows = []
    for val in grid:
        full = np.empty(box.d)
        full[coord] = val
        if not rest:
            rows.append((float(val), full.copy(), float(surface(full))))
            continue

        def f(sub, val=val):
            full[rest] = sub
            full[coord] = val
            return surface(full.copy())

        sub, fv, _, _ = nelder_mead(f, sub_box, start, scale, config.eps(N), config.max_evals, config.restart)
        full[rest] = sub
        full[coord] = val
        rows.append((float(val), full.copy(), fv))
        start = sub
    return rows
