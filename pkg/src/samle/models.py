"""Parameter boxes and diffusion models on the unit-diffusion scale.

A model maps the observed process V through ``eta`` to a process X with unit
diffusion coefficient and drift ``alpha``.  Everything the likelihood
estimator needs is expressed in terms of

    phi(u) = (alpha^2 + alpha')(u) / 2 - l,     l = inf_u (alpha^2 + alpha')(u) / 2
    r(u)   = sup_{z > u} phi(z)

which every concrete model supplies in closed form.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParameterBox",
    "TransformedModel",
    "LogisticGrowthModel",
    "DriftedBrownianModel",
    "logistic_lambda",
    "ConditionReport",
    "check_conditions",
    "get_model",
    "MODELS",
]


@dataclass(frozen=True)
class ParameterBox:
    """Compact box ``[lower_k, upper_k]`` for each of ``d`` coordinates."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ValueError("box bounds must be 1-d vectors of equal length >= 1")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("box bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError(f"box needs lower < upper in every coordinate, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_pairs(cls, pairs) -> "ParameterBox":
        pairs = [tuple(map(float, p)) for p in pairs]
        return cls(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    @property
    def d(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta, tol: float = 0.0) -> bool:
        theta = np.asarray(theta, dtype=float)
        slack = tol * self.width
        return bool(np.all(theta >= self.lower - slack) and np.all(theta <= self.upper + slack))

    def fold(self, theta) -> np.ndarray:
        """Reflect coordinates back into the box at its walls."""
        theta = np.asarray(theta, dtype=float)
        w = self.width
        z = np.mod(theta - self.lower, 2.0 * w)
        z = np.where(z > w, 2.0 * w - z, z)
        return self.lower + z

    def grid(self, points_per_coord: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, points_per_coord) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def __str__(self) -> str:
        return "; ".join(f"{lo:g},{hi:g}" for lo, hi in zip(self.lower, self.upper))


class TransformedModel(ABC):
    """A scalar diffusion dV = b(V) ds + sigma(V) dB seen through X = eta(V).

    Methods are vectorised in the state argument and take ``theta`` as a 1-d
    parameter vector.  Each model fixes the sign of ``eta`` itself; nothing in
    the package flips it.  The antiderivative ``A`` is normalised so that
    ``A(0, theta) = 0``.
    """

    name: str = ""
    param_names: tuple[str, ...] = ()
    state_space: tuple[float, float] = (-math.inf, math.inf)
    transformed_space: tuple[float, float] = (-math.inf, math.inf)

    @property
    def d(self) -> int:
        return len(self.param_names)

    @abstractmethod
    def eta(self, v, theta): ...

    @abstractmethod
    def eta_inv(self, u, theta): ...

    @abstractmethod
    def eta_du(self, v, theta): ...

    @abstractmethod
    def alpha(self, u, theta): ...

    @abstractmethod
    def alpha_du(self, u, theta): ...

    @abstractmethod
    def A(self, u, theta): ...

    @abstractmethod
    def l(self, theta) -> float: ...

    @abstractmethod
    def phi(self, u, theta): ...

    @abstractmethod
    def r(self, u, theta): ...

    @abstractmethod
    def lambda_bound(self, E, v, w, t, box: ParameterBox): ...

    @abstractmethod
    def drift_b(self, v, theta): ...

    @abstractmethod
    def diff_sigma(self, v, theta): ...

    def box_problems(self, box: ParameterBox) -> list[str]:
        """Reasons the box cannot be used with this model (empty when fine)."""
        if box.d != self.d:
            return [f"{self.name} has {self.d} parameters, box has {box.d}"]
        return []

    def in_state_space(self, v) -> np.ndarray:
        lo, hi = self.state_space
        v = np.asarray(v, dtype=float)
        return (v > lo) & (v < hi)

    def check_state(self, *values) -> None:
        for v in values:
            if not np.all(self.in_state_space(v)):
                raise ValueError(f"state value(s) outside {self.name} state space {self.state_space}")

    def log_prefactor(self, v, w, t, theta):
        """log of |eta'(w)| N_t(y - x) exp{A(y) - A(x) - l t}, vectorised over intervals."""
        x = self.eta(v, theta)
        y = self.eta(w, theta)
        return (
            np.log(np.abs(self.eta_du(w, theta)))
            - (y - x) ** 2 / (2.0 * t)
            - 0.5 * np.log(2.0 * np.pi * t)
            + self.A(y, theta)
            - self.A(x, theta)
            - self.l(theta) * t
        )


def logistic_lambda(E, v, w, t, box: ParameterBox):
    """Poisson rate dominating r(m(E, theta), theta) over the whole (delta, c, sigma) box."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(v <= 0) or np.any(w <= 0):
        raise ValueError("logistic growth states must be positive")
    (d_lo, c_lo, s_lo), (d_hi, _, s_hi) = box.lower, box.upper
    q = np.log(v * w) + np.sqrt(2.0 * t * s_hi**2 * np.asarray(E, dtype=float) + np.log(w / v) ** 2)
    bracket = np.maximum((np.exp(q / 2.0) / c_lo - 1.0) ** 2, 1.0)
    return d_hi**2 / (2.0 * s_lo**2) * bracket


class LogisticGrowthModel(TransformedModel):
    """dV = delta V (1 - V / c) ds + sigma V dB on (0, inf), theta = (delta, c, sigma).

    Uses the negated transform eta(v) = -log(v) / sigma so that
    (alpha^2 + alpha') is bounded above on right half-lines.  With
    K = delta / (sigma c) and e = exp(-sigma u):

        alpha  = sigma/2 - delta/sigma + K e
        phi    = delta^2 / (2 sigma^2) * (e / c - 1)^2
        r      = delta^2 / (2 sigma^2) * max((e / c - 1)^2, 1)
    """

    name = "logistic"
    param_names = ("delta", "c", "sigma")
    state_space = (0.0, math.inf)

    def eta(self, v, theta):
        return -np.log(v) / theta[2]

    def eta_inv(self, u, theta):
        return np.exp(-theta[2] * np.asarray(u))

    def eta_du(self, v, theta):
        return -1.0 / (theta[2] * np.asarray(v))

    def alpha(self, u, theta):
        delta, c, sigma = theta
        return sigma / 2.0 - delta / sigma + delta / (sigma * c) * np.exp(-sigma * np.asarray(u))

    def alpha_du(self, u, theta):
        delta, c, sigma = theta
        return -delta / c * np.exp(-sigma * np.asarray(u))

    def A(self, u, theta):
        delta, c, sigma = theta
        u = np.asarray(u)
        return (sigma / 2.0 - delta / sigma) * u - delta / (sigma**2 * c) * np.expm1(-sigma * u)

    def l(self, theta):
        delta, _, sigma = theta
        return sigma**2 / 8.0 - delta / 2.0

    def phi(self, u, theta):
        delta, c, sigma = theta
        return delta**2 / (2.0 * sigma**2) * (np.exp(-sigma * np.asarray(u)) / c - 1.0) ** 2

    def r(self, u, theta):
        delta, c, sigma = theta
        return delta**2 / (2.0 * sigma**2) * np.maximum((np.exp(-sigma * np.asarray(u)) / c - 1.0) ** 2, 1.0)

    def lambda_bound(self, E, v, w, t, box):
        return logistic_lambda(E, v, w, t, box)

    def drift_b(self, v, theta):
        delta, c, _ = theta
        return delta * v * (1.0 - v / c)

    def diff_sigma(self, v, theta):
        return theta[2] * np.asarray(v)

    def box_problems(self, box):
        problems = super().box_problems(box)
        if not problems and np.any(box.lower <= 0):
            problems.append("logistic box needs strictly positive lower bounds (sigma_l = 0 makes lambda infinite)")
        return problems


class DriftedBrownianModel(TransformedModel):
    """dV = mu ds + dB.  phi is identically zero, so the estimator is exact."""

    name = "bm-drift"
    param_names = ("mu",)

    def eta(self, v, theta):
        return np.asarray(v, dtype=float) * 1.0

    def eta_inv(self, u, theta):
        return np.asarray(u, dtype=float) * 1.0

    def eta_du(self, v, theta):
        return np.ones_like(np.asarray(v, dtype=float))

    def alpha(self, u, theta):
        return np.full_like(np.asarray(u, dtype=float), theta[0])

    def alpha_du(self, u, theta):
        return np.zeros_like(np.asarray(u, dtype=float))

    def A(self, u, theta):
        return theta[0] * np.asarray(u, dtype=float)

    def l(self, theta):
        return 0.5 * theta[0] ** 2

    def phi(self, u, theta):
        return np.zeros_like(np.asarray(u, dtype=float))

    def r(self, u, theta):
        return np.zeros_like(np.asarray(u, dtype=float))

    def lambda_bound(self, E, v, w, t, box):
        return np.zeros(np.broadcast(np.asarray(E), np.asarray(v), np.asarray(w)).shape)

    def drift_b(self, v, theta):
        return np.full_like(np.asarray(v, dtype=float), theta[0])

    def diff_sigma(self, v, theta):
        return np.ones_like(np.asarray(v, dtype=float))


MODELS = {"logistic": LogisticGrowthModel, "bm-drift": DriftedBrownianModel}


def get_model(name: str) -> TransformedModel:
    try:
        return MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


@dataclass
class ConditionReport:
    """Numeric screen of the bound conditions on a grid.

    ``min_phi`` should be >= -tol; ``r_excess`` is the largest amount by which
    phi on a right half-line of the grid exceeds the reported r at its left
    end; ``lambda_margin`` is min(lambda_bound - r(m)) over the sampled draws.
    """

    min_phi: float = math.nan
    r_excess: float = math.nan
    lambda_margin: float = math.nan
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_conditions(
    model: TransformedModel,
    box: ParameterBox,
    grid,
    theta_points: int = 5,
    exp_draws=(0.01, 0.1, 0.5, 1.0, 2.0, 5.0),
    tol: float = 1e-9,
) -> ConditionReport:
    report = ConditionReport()
    problems = model.box_problems(box)
    if problems:
        report.violations.extend(problems)
        return report
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        report.violations.append("empty grid")
        return report
    lo, hi = model.transformed_space
    if np.any(grid <= lo) or np.any(grid >= hi):
        report.violations.append("grid leaves the transformed state space")
        return report

    thetas = box.grid(theta_points)
    min_phi, r_excess = math.inf, -math.inf
    for theta in thetas:
        phi = model.phi(grid, theta)
        r = model.r(grid, theta)
        min_phi = min(min_phi, float(phi.min()))
        suffix_max = np.maximum.accumulate(phi[::-1])[::-1]
        r_excess = max(r_excess, float(np.max(suffix_max - r)))
    report.min_phi, report.r_excess = min_phi, r_excess

    # Data pairs drawn from the grid mapped back to the original scale at the box centre.
    centre = box.center
    states = model.eta_inv(grid[:: max(1, grid.size // 7)], centre)
    margin = math.inf
    for v in states:
        for w in states:
            for E in exp_draws:
                lam = float(model.lambda_bound(E, v, w, 1.0, box))
                for theta in thetas:
                    x, y = model.eta(v, theta), model.eta(w, theta)
                    m = 0.5 * (x + y - math.sqrt(2.0 * E + (y - x) ** 2))
                    margin = min(margin, lam - float(model.r(m, theta)))
    report.lambda_margin = margin

    if min_phi < -tol:
        report.violations.append(f"phi negative on grid (min {min_phi:.3g})")
    if r_excess > tol * max(1.0, abs(r_excess)):
        report.violations.append(f"phi exceeds r on a right half-line by {r_excess:.3g}")
    if margin < -tol:
        report.violations.append(f"lambda_bound below r(m) by {-margin:.3g}")
    return report
