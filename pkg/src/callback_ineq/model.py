"""Sequential logistic callback response model.

The probability of responding at attempt ``j`` given no response at attempts
``1..j-1`` is ``expit(alpha_j + beta' q(y))``; ``q`` is a fixed basis shared by
all attempts while every attempt has its own intercept.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np

from .exceptions import DataError, DegenerateSampleError, DomainError, NumericError

_CATALOG: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "y": lambda y: y,
    "y2": lambda y: y * y,
    "logy": np.log,
    "logy2": lambda y: np.log(y) ** 2,
}
CATALOG_ORDER = ("y", "y2", "logy", "logy2")
_LABELS = {"y": "y", "y2": "y^2", "logy": "log(y)", "logy2": "log(y)^2"}


def expit(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_expit(x):
    """``log(expit(x))``; ``log(1 - expit(x))`` is ``log_expit(-x)``."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


@dataclass(frozen=True)
class BasisSpec:
    """Ordered list of basis terms defining ``q(y)``.

    Built-in tokens are ``y``, ``y2``, ``logy`` and ``logy2``. Arbitrary terms can
    be supplied through ``functions`` (name -> vectorised callable); those are
    not reachable from the command line.
    """

    terms: tuple[str, ...] = ("logy",)
    functions: Mapping[str, Callable] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if len(set(terms)) != len(terms):
            raise DomainError(f"basis terms must be distinct, got {terms}")
        for t in terms:
            if t not in _CATALOG and t not in self.functions:
                raise DomainError(f"unknown basis term {t!r}; catalog is {CATALOG_ORDER}")

    @classmethod
    def from_tokens(cls, tokens: str | Sequence[str]) -> "BasisSpec":
        """Catalog tokens (comma-separated or a sequence), put in catalog order."""
        if isinstance(tokens, str):
            tokens = [t.strip() for t in tokens.split(",") if t.strip()]
            if tokens == ["none"]:
                tokens = []
        unknown = [t for t in tokens if t not in _CATALOG]
        if unknown:
            raise DomainError(f"unknown basis token(s) {unknown}; catalog is {CATALOG_ORDER}")
        return cls(tuple(sorted(tokens, key=CATALOG_ORDER.index)))

    @property
    def d(self) -> int:
        return len(self.terms)

    @property
    def label(self) -> str:
        if not self.terms:
            return "(intercept only)"
        names = [_LABELS.get(t, t) for t in self.terms]
        return names[0] if len(names) == 1 else "(" + ", ".join(names) + ")"

    @property
    def token(self) -> str:
        return ",".join(self.terms) if self.terms else "none"

    def evaluate(self, y) -> np.ndarray:
        """Design block ``q(y)`` with shape ``(len(y), d)``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if np.any(~(y > 0)):
            raise DomainError("basis is only defined for y > 0")
        cols = [self.functions[t](y) if t in self.functions else _CATALOG[t](y) for t in self.terms]
        if not cols:
            return np.zeros((y.shape[0], 0))
        return np.column_stack(cols).astype(float)

    def sort_key(self):
        return (self.d, tuple(CATALOG_ORDER.index(t) if t in CATALOG_ORDER else 99 for t in self.terms), self.terms)


def candidate_bases() -> list[BasisSpec]:
    """The 14 candidate bases of the selection table.

    Singletons and pairs of the catalog, the three triples containing ``y``,
    and the full set.
    """
    out = [BasisSpec((t,)) for t in CATALOG_ORDER]
    out += [BasisSpec(c) for c in combinations(CATALOG_ORDER, 2)]
    out += [BasisSpec(c) for c in combinations(CATALOG_ORDER, 3) if "y" in c]
    out.append(BasisSpec(CATALOG_ORDER))
    return out


@dataclass(frozen=True)
class ModelParams:
    """Attempt intercepts ``alphas`` (length m) and shared slope ``beta`` (length d)."""

    alphas: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alphas, dtype=float)).copy()
        b = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        if a.ndim != 1 or b.ndim != 1 or a.size < 1:
            raise DomainError("alphas must be a nonempty vector and beta a vector")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DomainError("model parameters must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "beta", b)

    @property
    def m(self) -> int:
        return self.alphas.size

    @property
    def d(self) -> int:
        return self.beta.size

    @classmethod
    def zeros(cls, m: int, d: int) -> "ModelParams":
        return cls(np.zeros(m), np.zeros(d))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alphas, self.beta])

    @classmethod
    def from_vector(cls, vec, m: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:m], vec[m:])


@dataclass(frozen=True)
class CallbackDataset:
    """Observed sample of (outcome, attempt index) records.

    ``y`` holds NaN for nonrespondents, which carry ``d == m + 1``.
    """

    y: np.ndarray
    d: np.ndarray
    m: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel().copy()
        d = np.asarray(self.d).ravel()
        if y.shape != d.shape:
            raise DataError("y and d must have the same length")
        if not np.all(np.equal(np.mod(d, 1), 0)):
            raise DataError("attempt indices must be integers")
        d = d.astype(int)
        m = int(self.m)
        if m < 1:
            raise DataError("m must be >= 1")
        if np.any((d < 1) | (d > m + 1)):
            raise DataError(f"attempt indices must lie in 1..{m + 1}")
        resp = d <= m
        if np.any(np.isnan(y[resp])):
            raise DataError("respondents (d <= m) must have an observed outcome")
        if np.any(~np.isnan(y[~resp])):
            raise DataError(f"nonrespondents (d = {m + 1}) must not carry an outcome")
        if np.any(y[resp] <= 0):
            raise DomainError("observed outcomes must be strictly positive")
        y.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_arrays(cls, y_obs, d_obs, n_missing: int, m: int) -> "CallbackDataset":
        y = np.concatenate([np.asarray(y_obs, float), np.full(n_missing, np.nan)])
        d = np.concatenate([np.asarray(d_obs, int), np.full(n_missing, m + 1, dtype=int)])
        return cls(y, d, m)

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def respondents(self) -> np.ndarray:
        return self.d <= self.m

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.respondents))

    @property
    def y_obs(self) -> np.ndarray:
        return self.y[self.respondents]

    @property
    def d_obs(self) -> np.ndarray:
        return self.d[self.respondents]

    def attempt_counts(self) -> np.ndarray:
        """Counts for attempts ``1..m`` followed by the never-responded count."""
        return np.bincount(self.d, minlength=self.m + 2)[1:]

    def check_response_condition(self):
        """Require ``1 <= n <= N - 1`` (some but not all units respond)."""
        n, N = self.n, self.N
        if n == 0:
            raise DegenerateSampleError("no respondents: response probability is degenerate at 0 (condition C2)")
        if n == N:
            raise DegenerateSampleError("no nonrespondents: response probability is degenerate at 1 (condition C2)")


def basis_rank(basis: BasisSpec, y) -> int:
    """Column rank of ``[1, q(y)]``; less than ``d + 1`` flags condition C1 failure."""
    X = np.column_stack([np.ones(np.size(y)), basis.evaluate(y)])
    return int(np.linalg.matrix_rank(X))


def _check_y(y):
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise DomainError("response model is only defined for y > 0")
    return y


def _check_j(j, m):
    if not 1 <= j <= m:
        raise IndexError(f"attempt index {j} outside 1..{m}")


def linear_predictor(y, params: ModelParams, basis: BasisSpec) -> np.ndarray:
    """``alpha_j + beta' q(y)`` with shape ``(len(y), m)``."""
    if basis.d != params.d:
        raise DomainError(f"basis has d={basis.d} but beta has length {params.d}")
    Q = basis.evaluate(y)
    return params.alphas[None, :] + (Q @ params.beta)[:, None]


def attempt_probs(y, params: ModelParams, basis: BasisSpec) -> np.ndarray:
    """Matrix of per-attempt conditional response probabilities, shape ``(n, m)``."""
    return expit(linear_predictor(y, params, basis))


def _scalar(x, like):
    return float(x[0]) if np.ndim(like) == 0 else x


def attempt_prob(y, j: int, params: ModelParams, basis: BasisSpec):
    """Conditional response probability at attempt ``j`` (1-based)."""
    y = _check_y(y)
    _check_j(j, params.m)
    return _scalar(attempt_probs(np.atleast_1d(y), params, basis)[:, j - 1], y)


def rho_matrix(y, params: ModelParams, basis: BasisSpec) -> np.ndarray:
    """Unconditional ``Pr(D = j | y)`` for ``j = 1..m``, shape ``(n, m)``."""
    pi = attempt_probs(y, params, basis)
    survive = np.cumprod(1.0 - pi, axis=1)
    prior = np.hstack([np.ones((pi.shape[0], 1)), survive[:, :-1]])
    return pi * prior


def rho_j(y, j: int, params: ModelParams, basis: BasisSpec):
    y = _check_y(y)
    _check_j(j, params.m)
    return _scalar(rho_matrix(np.atleast_1d(y), params, basis)[:, j - 1], y)


def rho(y, params: ModelParams, basis: BasisSpec):
    """Probability of responding within ``m`` attempts."""
    y = _check_y(y)
    yy = np.atleast_1d(y)
    lp = linear_predictor(yy, params, basis)
    never = np.exp(log_expit(-lp).sum(axis=1))
    total = rho_matrix(yy, params, basis).sum(axis=1)
    out = 1.0 - never
    if np.max(np.abs(total - out)) > 1e-12:
        raise NumericError("sum of attempt probabilities disagrees with 1 - prod(1 - pi)")
    return _scalar(out, y)


def v_vector(y, params: ModelParams, eta: float, basis: BasisSpec) -> np.ndarray:
    """Influence auxiliary vector of length ``m + d + 2`` (rows per ``y`` if vector input).

    Entries are ``(rho - 1)/rho * pi_j`` for the intercepts,
    ``(rho - 1)/rho * sum(pi) * q_k(y)`` for the slopes, then ``1/rho`` and
    ``eta**2/rho``.
    """
    y = _check_y(y)
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    yy = np.atleast_1d(y)
    pi = attempt_probs(yy, params, basis)
    r = 1.0 - np.prod(1.0 - pi, axis=1)
    Q = basis.evaluate(yy)
    c = ((r - 1.0) / r)[:, None]
    out = np.hstack([c * pi, c * pi.sum(axis=1, keepdims=True) * Q, (1.0 / r)[:, None], (eta**2 / r)[:, None]])
    if not np.all(np.isfinite(out)):
        raise NumericError("v(y) is not finite")
    return out[0] if np.ndim(y) == 0 else out
