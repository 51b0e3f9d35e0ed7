"""Plug-in inequality measures of a discrete weighted distribution."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .estimator import FittedDistribution
from .exceptions import DomainError


def cdf(dist: FittedDistribution, y):
    return dist.cdf(y)


def quantile(dist: FittedDistribution, tau):
    return dist.quantile(tau)


def quantile_function(dist: FittedDistribution, tau1: float, tau2: float, g: str = "difference") -> float:
    """``g`` (``"difference"`` or ``"ratio"``) of the plug-in quantiles at ``tau1`` and ``tau2``."""
    q1, q2 = dist.quantile(tau1), dist.quantile(tau2)
    if g == "difference":
        return q1 - q2
    if g == "ratio":
        if q2 == 0:
            raise DomainError("quantile ratio with zero denominator")
        return q1 / q2
    raise DomainError(f"unknown quantile function {g!r}")


# --------------------------------------------------------------------------
# u-components and the h catalog


@dataclass(frozen=True)
class UComponent:
    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    needs_positive: bool = False

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.needs_positive and np.any(y <= 0):
            raise DomainError(f"u-component {self.name!r} requires y > 0")
        return self.fn(y)


def power(k: float) -> UComponent:
    k = float(k)
    frac = not k.is_integer()
    return UComponent(f"y^{k:g}", lambda y: y**k, needs_positive=frac or k < 0)


def constant(c: float = 1.0) -> UComponent:
    return UComponent(f"const({c:g})", lambda y: np.full_like(y, c, dtype=float))


LOG = UComponent("log(y)", np.log, needs_positive=True)
YLOGY = UComponent("y*log(y)", lambda y: y * np.log(y), needs_positive=True)
IDENTITY = power(1)


def linear_functional(dist: FittedDistribution, u) -> np.ndarray:
    """``sum_i p_i u(Y_i)`` componentwise."""
    return np.array([np.dot(dist.weights, uc(dist.support)) for uc in u])


@dataclass(frozen=True)
class UHSpec:
    """A measure ``h(gamma_u)`` with ``gamma_u = E u(Y)``.

    ``h`` and ``grad`` map the vector of linear functionals to the measure and
    to its gradient. Build instances with the catalog constructors below.
    """

    name: str
    u: tuple
    h: Callable = field(compare=False)
    grad: Callable = field(compare=False)


def _check_zeta(zeta):
    if not 0 < zeta < 1:
        raise DomainError("zeta must lie in (0, 1)")
    return float(zeta)


def _positive(x, what="mean"):
    if x <= 0:
        raise DomainError(f"{what} must be positive")


def moment(k: int) -> UHSpec:
    return UHSpec(f"moment({k})", (power(k),), lambda x: x[0], lambda x: np.array([1.0]))


def centered_moment(k: int) -> UHSpec:
    """k-th central moment through the binomial expansion in raw moments."""
    from math import comb

    k = int(k)
    if k < 1:
        raise DomainError("k must be >= 1")
    u = (constant(1.0),) + tuple(power(s) for s in range(1, k + 1))

    def h(x):
        return sum(comb(k, s) * x[s] * (-x[1]) ** (k - s) for s in range(k + 1))

    def grad(x):
        g = np.array([comb(k, s) * (-x[1]) ** (k - s) for s in range(k + 1)], dtype=float)
        g[1] += sum(-comb(k, s) * (k - s) * x[s] * (-x[1]) ** (k - s - 1) for s in range(k))
        return g

    return UHSpec(f"centered_moment({k})", u, h, grad)


def _cv_h(x):
    _positive(x[0])
    return np.sqrt(max(x[1] - x[0] ** 2, 0.0)) / x[0]


def _cv_grad(x):
    s = np.sqrt(x[1] - x[0] ** 2)
    if s <= 0:
        raise DomainError("coefficient of variation gradient undefined at zero variance")
    return np.array([-x[1] / (x[0] ** 2 * s), 1.0 / (2 * x[0] * s)])


COEFFICIENT_OF_VARIATION = UHSpec("cv", (power(1), power(2)), _cv_h, _cv_grad)


def generalized_entropy(zeta: float) -> UHSpec:
    z = _check_zeta(zeta)
    c = 1.0 / (z * (z - 1.0))

    def h(x):
        _positive(x[0])
        return c * (x[1] / x[0] ** z - 1.0)

    def grad(x):
        return np.array([-c * z * x[1] / x[0] ** (z + 1.0), c / x[0] ** z])

    return UHSpec(f"ge({z:g})", (power(1), power(z)), h, grad)


def _theil_h(x):
    _positive(x[0])
    return x[1] / x[0] - np.log(x[0])


def _theil_grad(x):
    _positive(x[0])
    return np.array([-x[1] / x[0] - 1.0, 1.0]) / x[0]


THEIL = UHSpec("theil", (IDENTITY, YLOGY), _theil_h, _theil_grad)


def _mld_h(x):
    _positive(x[0])
    return np.log(x[0]) - x[1]


MEAN_LOG_DEVIATION = UHSpec("mld", (IDENTITY, LOG), _mld_h, lambda x: np.array([1.0 / x[0], -1.0]))


def atkinson(zeta: float) -> UHSpec:
    z = _check_zeta(zeta)

    def h(x):
        _positive(x[0])
        return 1.0 - x[1] ** (1.0 / z) / x[0]

    def grad(x):
        return np.array([x[1] ** (1.0 / z) / x[0] ** 2, -(x[1] ** (1.0 / z - 1.0)) / (z * x[0])])

    return UHSpec(f"atkinson({z:g})", (power(1), power(z)), h, grad)


def uh_measure(dist: FittedDistribution, spec: UHSpec) -> float:
    return float(spec.h(linear_functional(dist, spec.u)))


def theil(dist: FittedDistribution) -> float:
    s, p = dist.support, dist.weights
    if np.any(s <= 0):
        raise DomainError("Theil index requires positive support")
    mu = np.dot(p, s)
    return float(np.dot(p, s * np.log(s)) / mu - np.log(mu))


# --------------------------------------------------------------------------
# Gini


def gini_parts(dist: FittedDistribution) -> tuple[float, float]:
    """``(psi, mu)`` with ``psi = 2 sum p_i Y_i F(Y_i)`` and ``mu = sum p_i Y_i``."""
    s, p = dist.support, dist.weights
    if np.any(s <= 0):
        raise DomainError("Gini index requires positive support")
    F = dist.cdf_at_support()
    return float(2.0 * np.dot(p * s, F)), float(np.dot(p, s))


def gini(dist: FittedDistribution) -> float:
    """``psi / mu - 1`` with right-continuous ``F`` (a V-statistic: one atom gives 1)."""
    psi, mu = gini_parts(dist)
    return psi / mu - 1.0


def gini_bruteforce(dist: FittedDistribution) -> float:
    """O(n^2) double-sum form; test oracle for :func:`gini`."""
    s, p = dist.support, dist.weights
    ind = (s[None, :] <= s[:, None]).astype(float)
    psi = 2.0 * np.sum(p[:, None] * p[None, :] * s[:, None] * ind)
    return psi / np.dot(p, s) - 1.0


MEASURES = {
    "theil": THEIL,
    "cv": COEFFICIENT_OF_VARIATION,
    "mld": MEAN_LOG_DEVIATION,
}
