"""Experiment drivers: ladders, replication studies and grid evaluations.

These functions return plain row lists; writing files is left to the CLI.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .mle import MLEResult, SimplexConfig, maximize, warm_start_ladder
from .models import ParameterBox, TransformedModel
from .oracles import EulerConfig, ObservationSeries, simulate_datasets
from .rng import key_hash
from .sam import LikelihoodSurface

__all__ = [
    "derived_seed",
    "build_surface",
    "run_ladder",
    "Table2Result",
    "run_table2",
    "nrule",
    "ScalingResult",
    "run_nscaling",
    "surface_grid",
]

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 62) - 1


def derived_seed(seed: int, *path: int) -> int:
    """A child experiment seed, a pure function of the parent seed and an index path."""
    fields = list(path) + [0, 0, 0]
    # purpose tags from 100 up never collide with the draw purposes
    return int(key_hash(seed, fields[0], fields[1], 100 + fields[2])) & _SEED_MASK


def build_surface(model: TransformedModel, box: ParameterBox, series: ObservationSeries, seed: int, N: int,
                  cache_dir=None) -> LikelihoodSurface:
    series.check(model)
    v, w, t = series.intervals()
    return LikelihoodSurface.build(model, box, v, w, t, seed, N, cache_dir=cache_dir)


def run_ladder(model, box, series, seed: int, Ns: Sequence[int], config: SimplexConfig,
               cache_dir=None, information: bool = True) -> tuple[LikelihoodSurface, list[MLEResult]]:
    """Warm-start ladder on nested banks cut from one bank of size max(Ns)."""
    surface = build_surface(model, box, series, seed, max(Ns), cache_dir)
    return surface, warm_start_ladder(surface, Ns, config, information=information)


@dataclass
class Table2Result:
    theta_ref: np.ndarray
    Ns: list[int]
    scaled: np.ndarray  # R x len(Ns) x d, entries sqrt(N) (theta^N - theta_ref)

    @property
    def R(self) -> int:
        return self.scaled.shape[0]

    def means(self) -> np.ndarray:
        return self.scaled.mean(axis=0)

    def ses(self) -> np.ndarray:
        if self.R < 2:
            return np.full(self.scaled.shape[1:], np.nan)
        return self.scaled.std(axis=0, ddof=1) / math.sqrt(self.R)

    def rows(self) -> list[tuple]:
        m, s = self.means(), self.ses()
        return [(N, *m[k], *s[k]) for k, N in enumerate(self.Ns)]


def run_table2(model, box, series, Ns: Sequence[int], R: int, seed: int, config: SimplexConfig,
               ref_N: int = 10_000, theta_ref=None, ref_eps: float = 1e-7,
               progress: Callable[[int], None] | None = None) -> Table2Result:
    """sqrt(N)(theta^N - theta_ref) over R independent bank seeds, nested across Ns.

    The reference maximiser uses one bank of size ``ref_N``; replicate r
    uses a bank of size max(Ns) from ``derived_seed(seed, 2, r)`` and cuts
    the smaller Ns from it.  Every search starts at theta_ref.
    """
    Ns = [int(n) for n in Ns]
    if R < 1:
        raise ValueError("need R >= 1")
    tight = replace(config, eps_schedule=lambda N: ref_eps)
    if theta_ref is None:
        ref_surface = build_surface(model, box, series, derived_seed(seed, 1), ref_N)
        theta_ref = maximize(ref_surface, tight, N=ref_N, information=False).theta_hat
        del ref_surface
    theta_ref = np.asarray(theta_ref, dtype=float)
    start = replace(tight, initial_point=theta_ref)
    out = np.empty((R, len(Ns), box.d))
    for r in range(R):
        surf = build_surface(model, box, series, derived_seed(seed, 2, r + 1), max(Ns))
        for k, N in enumerate(Ns):
            s = surf if N == surf.N else surf.prefix(N)
            res = maximize(s, start, N=N, information=False)
            out[r, k] = math.sqrt(N) * (res.theta_hat - theta_ref)
        if progress is not None:
            progress(r + 1)
    return Table2Result(theta_ref, Ns, out)


def nrule(rule: str) -> Callable[[int], int]:
    """Monte Carlo size as a function of n: 'sqrt', 'sqrt*<c>', 'const:<N>' or 'linear*<c>'."""
    rule = rule.strip()
    if rule == "sqrt":
        return lambda n: int(math.ceil(math.sqrt(n)))
    if rule.startswith("sqrt*"):
        c = float(rule[5:])
        return lambda n: max(1, int(math.ceil(c * math.sqrt(n))))
    if rule.startswith("const:"):
        N = int(rule[6:])
        if N < 1:
            raise ValueError("constant N must be positive")
        return lambda n: N
    if rule.startswith("linear*"):
        c = float(rule[7:])
        return lambda n: max(1, int(math.ceil(c * n)))
    raise ValueError(f"unknown N rule {rule!r}")


@dataclass
class ScalingResult:
    n: int
    N: int
    rule: str
    scaled: np.ndarray  # R x d, entries sqrt(n) (theta_hat - theta0)

    def mean(self) -> np.ndarray:
        return self.scaled.mean(axis=0)

    def var(self) -> np.ndarray:
        return self.scaled.var(axis=0, ddof=1) if self.scaled.shape[0] > 1 else np.full(self.scaled.shape[1], np.nan)

    def row(self) -> tuple:
        return (self.n, self.N, self.rule, *self.mean(), *self.var())


def run_nscaling(model, box, theta0, V0: float, dt: float, pairs: Sequence[tuple[int, str]], R: int, seed: int,
                 config: SimplexConfig, euler: EulerConfig = EulerConfig(),
                 progress: Callable[[int, int], None] | None = None) -> list[ScalingResult]:
    """For each (n, rule): R fresh datasets, one estimate each, sqrt(n)(theta_hat - theta0).

    Dataset r of size n comes from ``derived_seed(seed, 3, n)`` replicate r
    and its bank from ``derived_seed(seed, 4, n, r)``, so the same n under
    different rules reuses the same data.
    """
    theta0 = np.asarray(theta0, dtype=float)
    out = []
    for n, rule in pairs:
        N = nrule(rule)(n)
        data = simulate_datasets(model, theta0, V0, n, dt, euler, derived_seed(seed, 3, n), np.arange(1, R + 1))
        scaled = np.empty((R, box.d))
        for r, series in enumerate(data):
            surf = build_surface(model, box, series, derived_seed(seed, 4, n, r + 1), N)
            res = maximize(surf, config, N=N, information=False)
            scaled[r] = math.sqrt(n) * (res.theta_hat - theta0)
            if progress is not None:
                progress(n, r + 1)
        out.append(ScalingResult(n, N, rule, scaled))
    return out


def surface_grid(surface, points) -> list[tuple]:
    """(theta..., loglik) rows for every point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return [(*p, surface(p)) for p in points]
