"""Semiparametric full-likelihood estimation by EM.

The outcome distribution is a discrete distribution on the respondents'
outcomes with weights ``p_i``. Each EM iteration imputes, for every support
point, the expected number of nonrespondents sitting there (``w_i``), then
updates the weights in closed form, the response model by weighted logistic
regression, and ``eta`` as the weighted mean response probability.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_callback_arrays
from .exceptions import ConstraintError, DomainError, EstimationError
from .model import BasisSpec, CallbackDataset, ModelParams, log_expit, rho_matrix

ETA_CLAMP = 1e-10
SEPARATION_LP = 30.0


class SeparationWarning(UserWarning):
    """Logistic M-step optimum lies at infinity (linear predictor beyond +-30)."""


@dataclass(frozen=True)
class FittedDistribution:
    """Discrete distribution with positive ``weights`` on ``support``."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.support, dtype=float).ravel().copy()
        w = np.asarray(self.weights, dtype=float).ravel().copy()
        if s.shape != w.shape or s.size == 0:
            raise DomainError("support and weights must be nonempty and of equal length")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise DomainError("weights must be positive and finite")
        if abs(w.sum() - 1.0) > 1e-10:
            raise DomainError(f"weights must sum to one (got {w.sum():.15g})")
        order = np.argsort(s, kind="stable")
        s.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "support", s)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_sorted", s[order])
        object.__setattr__(self, "_cum", np.cumsum(w[order]))

    @classmethod
    def uniform(cls, support) -> "FittedDistribution":
        support = np.asarray(support, dtype=float).ravel()
        return cls(support, np.full(support.size, 1.0 / support.size))

    @property
    def n(self) -> int:
        return self.support.size

    def cdf(self, y):
        """Right-continuous ``sum(p_i * I(Y_i <= y))``."""
        idx = np.searchsorted(self._sorted, np.asarray(y, dtype=float), side="right")
        cum = np.concatenate([[0.0], self._cum])
        out = np.minimum(cum[idx], 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def cdf_at_support(self) -> np.ndarray:
        """``F(Y_i)`` including the full tied mass at ``Y_i``, in support order."""
        return self.cdf(self.support)

    def quantile(self, tau):
        """``inf{y : F(y) >= tau}``."""
        tau = np.asarray(tau, dtype=float)
        if np.any((tau <= 0) | (tau >= 1)):
            raise DomainError("tau must lie in (0, 1)")
        # guard against cumulative sums a hair below tau through rounding
        idx = np.searchsorted(self._cum, tau - 1e-14, side="left")
        out = self._sorted[np.minimum(idx, self._sorted.size - 1)]
        return float(out) if np.ndim(out) == 0 else out


@dataclass
class FullEstimate:
    """Maximiser of the semiparametric full likelihood plus EM bookkeeping."""

    params: ModelParams
    eta: float
    lam: float
    dist: FittedDistribution
    loglik: float
    iterations: int
    converged: bool
    basis: BasisSpec
    data: CallbackDataset
    trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.params.m

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def N(self) -> int:
        return self.data.N

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def profile_loglik(self) -> float:
        return self.loglik + self.n * np.log(self.n)

    def nu(self) -> np.ndarray:
        """Stacked ``(alpha, beta, eta, lambda)``."""
        return np.concatenate([self.params.alphas, self.params.beta, [self.eta, self.lam]])


# --------------------------------------------------------------------------
# likelihood pieces


def _log_rho_d(lp: np.ndarray, d_obs: np.ndarray) -> np.ndarray:
    """``log rho_{D_i}(Y_i)`` from the linear predictor matrix."""
    m = lp.shape[1]
    k = np.arange(m)[None, :]
    succ = k == (d_obs - 1)[:, None]
    before = k < (d_obs - 1)[:, None]
    return np.where(succ, log_expit(lp), 0.0).sum(axis=1) + np.where(before, log_expit(-lp), 0.0).sum(axis=1)


def _rho_from_lp(lp: np.ndarray) -> np.ndarray:
    return -np.expm1(log_expit(-lp).sum(axis=1))


def _lp(Q, params: ModelParams) -> np.ndarray:
    return params.alphas[None, :] + (Q @ params.beta)[:, None]


def log_likelihood(params: ModelParams, eta: float, dist: FittedDistribution, data: CallbackDataset,
                   basis: BasisSpec) -> float:
    """Semiparametric full log-likelihood (additive constant dropped)."""
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    p = np.asarray(dist.weights)
    if np.any(p <= 0):
        raise DomainError("all weights must be positive")
    if dist.support.size != data.n or not np.array_equal(dist.support, data.y_obs):
        raise DomainError("distribution support must be the respondents' outcomes")
    lp = _lp(basis.evaluate(data.y_obs), params)
    return float(_log_rho_d(lp, data.d_obs).sum() + np.log(p).sum() + (data.N - data.n) * np.log1p(-eta))


def e_step_weights(data: CallbackDataset, current: FullEstimate) -> np.ndarray:
    """Expected number of nonrespondents located at each support point."""
    eta = current.eta
    if eta >= 1:
        raise ZeroDivisionError("eta must be < 1 in the E-step")
    r = rho_matrix(data.y_obs, current.params, current.basis).sum(axis=1)
    return (data.N - data.n) * current.dist.weights * (1.0 - r) / (1.0 - eta)


def m_step_weights_to_p(w, N: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or w.size > N:
        raise DomainError("w must be nonnegative with length <= N")
    return (w + 1.0) / N


def m_step_eta(p, params: ModelParams, basis: BasisSpec, support) -> float:
    r = rho_matrix(support, params, basis).sum(axis=1)
    return float(np.dot(p, r))


# --------------------------------------------------------------------------
# weighted logistic M-step


@dataclass
class _LogisticResult:
    theta: np.ndarray
    iterations: int
    grad_norm: float
    separated: bool
    ridge_used: bool
    objective: float
    log_rho_d: np.ndarray
    lp: np.ndarray


def _newton_logistic(Q, d_obs, w, m, theta0, max_iter=100, tol=1e-10, ridge=1e-8):
    """Maximise the grouped-binomial log-likelihood of the expanded Bernoulli records.

    Respondent ``i`` contributes one success at attempt ``D_i``, failures at the
    earlier attempts, and ``w_i`` failures at every attempt. Parameters are the
    ``m`` attempt intercepts followed by the slope on ``q``.
    """
    n, dq = Q.shape
    k = np.arange(m)[None, :]
    S = (k == (d_obs - 1)[:, None]).astype(float)
    R = (k <= (d_obs - 1)[:, None]).astype(float)
    T = R + w[:, None]
    F = T - S

    def evaluate(theta):
        lp = theta[None, :m] + (Q @ theta[m:])[:, None]
        lpos, lneg = log_expit(lp), log_expit(-lp)
        return lp, lpos, lneg, float((S * lpos).sum() + (F * lneg).sum())

    theta = np.asarray(theta0, dtype=float).copy()
    lp, lpos, lneg, obj = evaluate(theta)
    ridge_used = False
    it = 0
    for it in range(1, max_iter + 1):
        pi = np.exp(lpos)
        resid = S - T * pi
        g = np.concatenate([resid.sum(axis=0), Q.T @ resid.sum(axis=1)])
        W = T * pi * np.exp(lneg)
        H = np.empty((m + dq, m + dq))
        H[:m, :m] = np.diag(W.sum(axis=0))
        H[:m, m:] = W.T @ Q
        H[m:, :m] = H[:m, m:].T
        H[m:, m:] = Q.T @ (W.sum(axis=1)[:, None] * Q)
        try:
            step = np.linalg.solve(H, g)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            ridge_used = True
            try:
                step = np.linalg.solve(H + ridge * np.eye(m + dq), g)
            except np.linalg.LinAlgError as exc:
                raise EstimationError("weighted normal equations are singular even after ridge") from exc
        t = 1.0
        while True:
            cand = theta + t * step
            c_lp, c_lpos, c_lneg, c_obj = evaluate(cand)
            if c_obj >= obj - 1e-12 * (1.0 + abs(obj)):
                break
            t *= 0.5
            if t < 1e-10:
                # no ascent along the Newton direction: stay put
                cand, c_lp, c_lpos, c_lneg, c_obj = theta, lp, lpos, lneg, obj
                break
        change = np.max(np.abs(cand - theta))
        theta, lp, lpos, lneg, obj = cand, c_lp, c_lpos, c_lneg, c_obj
        if change <= tol:
            break
    pi = np.exp(lpos)
    resid = S - T * pi
    g = np.concatenate([resid.sum(axis=0), Q.T @ resid.sum(axis=1)])
    log_rho_d = (S * lpos).sum(axis=1) + ((R - S) * lneg).sum(axis=1)
    return _LogisticResult(theta, it, float(np.max(np.abs(g))), bool(np.max(np.abs(lp)) > SEPARATION_LP),
                           ridge_used, obj, log_rho_d, lp)


def _checked_logistic(Q, d_obs, w, m, theta0):
    res = _newton_logistic(Q, d_obs, w, m, theta0)
    if res.separated:
        warnings.warn("logistic M-step: linear predictor exceeds 30 in magnitude (separation)",
                      SeparationWarning, stacklevel=3)
    elif res.grad_norm > 1e-8:
        raise EstimationError(f"logistic M-step did not converge (|grad|_inf = {res.grad_norm:.3g})")
    return res


def m_step_logistic(data: CallbackDataset, w, basis: BasisSpec, init: ModelParams | None = None) -> ModelParams:
    """Weighted logistic M-step for ``(alpha, beta)``.

    Emits :class:`SeparationWarning` when the optimum runs off to infinity.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise DomainError("w must be nonnegative")
    if data.n == 0:
        raise DomainError("need at least one respondent")
    init = init if init is not None else ModelParams.zeros(data.m, basis.d)
    res = _checked_logistic(basis.evaluate(data.y_obs), data.d_obs, w, data.m, init.to_vector())
    return ModelParams.from_vector(res.theta, data.m)


# --------------------------------------------------------------------------
# Lagrange profiling


def solve_lambda_rho(rho_values, eta: float) -> float:
    """Root of ``sum (rho_i - eta) / (1 + lam (rho_i - eta)) = 0`` on the positivity interval."""
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    a = np.asarray(rho_values, dtype=float) - eta
    if a.size == 0:
        raise DomainError("respondent support is empty")
    if np.max(np.abs(a)) <= 1e-12:
        return 1.0 / eta
    amax, amin = a.max(), a.min()
    if amin >= 0 or amax <= 0:
        raise ConstraintError("rho(Y_i) - eta has one sign on the support: the constraint "
                              "sum p_i {rho(Y_i) - eta} = 0 cannot hold with positive weights")

    def score(lam):
        return float(np.sum(a / (1.0 + lam * a)))

    lo, hi = -1.0 / amax, -1.0 / amin
    eps = 1e-9
    lam = brentq(score, lo + eps, hi - eps, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)
    denom = 1.0 + lam * a
    deriv = -float(np.sum(a * a / denom**2))
    if deriv != 0:
        polished = lam - score(lam) / deriv
        if lo < polished < hi and abs(score(polished)) <= abs(score(lam)):
            lam = polished
    return float(lam)


def solve_lambda(support, params: ModelParams, eta: float, basis: BasisSpec) -> float:
    r = rho_matrix(support, params, basis).sum(axis=1)
    return solve_lambda_rho(r, eta)


def lagrange_weights(support, params: ModelParams, eta: float, lam: float, basis: BasisSpec) -> np.ndarray:
    """Profiled weights ``1 / (n {1 + lam (rho_i - eta)})``."""
    r = rho_matrix(support, params, basis).sum(axis=1)
    denom = 1.0 + lam * (r - eta)
    if np.any(denom <= 0):
        raise DomainError("1 + lambda (rho_i - eta) must be positive for every support point")
    return 1.0 / (r.size * denom)


def profile_loglik(params: ModelParams, eta: float, data: CallbackDataset, basis: BasisSpec,
                   lam: float | None = None) -> float:
    """Profile log-likelihood with the weights eliminated."""
    lp = _lp(basis.evaluate(data.y_obs), params)
    r = _rho_from_lp(lp)
    if lam is None:
        lam = solve_lambda_rho(r, eta)
    denom = 1.0 + lam * (r - eta)
    if np.any(denom <= 0):
        raise DomainError("1 + lambda (rho_i - eta) must be positive")
    return float(_log_rho_d(lp, data.d_obs).sum() - np.log(denom).sum() + (data.N - data.n) * np.log1p(-eta))


# --------------------------------------------------------------------------
# EM driver


def fit_em(data: CallbackDataset, basis: BasisSpec, tol: float = 1e-5, max_iter: int = 10000,
           init: ModelParams | None = None) -> FullEstimate:
    """Fit the semiparametric model by EM.

    Starts from zero intercepts and slopes, uniform weights and
    ``eta = sum p_i rho(Y_i)`` (``1 - 2**-m`` at the default start), and stops
    once the log-likelihood increases by less than ``tol``.
    """
    if tol <= 0:
        raise DomainError("tol must be positive")
    data.check_response_condition()
    m, N, n = data.m, data.N, data.n
    Q = basis.evaluate(data.y_obs)
    d_obs = data.d_obs
    theta = (init if init is not None else ModelParams.zeros(m, basis.d)).to_vector()
    if theta.size != m + basis.d:
        raise DomainError("initial parameters do not match (m, d)")

    lp = theta[None, :m] + (Q @ theta[m:])[:, None]
    r = _rho_from_lp(lp)
    p = np.full(n, 1.0 / n)
    eta = float(np.dot(p, r))
    ll = float(_log_rho_d(lp, d_obs).sum() + np.log(p).sum() + (N - n) * np.log1p(-eta))
    trace = [ll]
    diag = {"eta_clamps": 0, "separation": False, "ridge": False}
    converged = False
    it = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        for it in range(1, max_iter + 1):
            w = (N - n) * p * (1.0 - r) / (1.0 - eta)
            p = (w + 1.0) / N
            p /= p.sum()
            try:
                res = _checked_logistic(Q, d_obs, w, m, theta)
            except EstimationError as exc:
                raise EstimationError(f"EM iteration {it}: {exc}", trace) from exc
            diag["separation"] |= res.separated
            diag["ridge"] |= res.ridge_used
            theta, lp = res.theta, res.lp
            r = _rho_from_lp(lp)
            eta = float(np.dot(p, r))
            if not ETA_CLAMP <= eta <= 1 - ETA_CLAMP:
                eta = min(max(eta, ETA_CLAMP), 1 - ETA_CLAMP)
                diag["eta_clamps"] += 1
            new_ll = float(res.log_rho_d.sum() + np.log(p).sum() + (N - n) * np.log1p(-eta))
            trace.append(new_ll)
            if new_ll < ll - 1e-10 * max(1.0, abs(ll)):
                raise EstimationError(f"EM log-likelihood decreased at iteration {it}: {ll!r} -> {new_ll!r}", trace)
            increase = new_ll - ll
            ll = new_ll
            if increase < tol:
                converged = True
                break
    params = ModelParams.from_vector(theta, m)
    lam = solve_lambda_rho(r, eta)
    diag["constraint"] = float(np.dot(p, r - eta))
    diag["lambda_gap"] = abs(lam - 1.0 / eta)
    diag["rank_deficient"] = int(np.linalg.matrix_rank(np.column_stack([np.ones(n), Q]))) < basis.d + 1
    return FullEstimate(params=params, eta=eta, lam=lam, dist=FittedDistribution(data.y_obs, p), loglik=ll,
                        iterations=it, converged=converged, basis=basis, data=data, trace=trace, diagnostics=diag)


# --------------------------------------------------------------------------
# estimator API


class CallbackEM(BaseEstimator):
    """Semiparametric full-likelihood estimator for callback data.

    Parameters
    ----------
    basis : str or BasisSpec, default="logy"
        Basis ``q(y)`` of the response model as comma-separated catalog tokens
        (``y``, ``y2``, ``logy``, ``logy2``) or ``"none"`` for intercepts only.
    m : int or None, default=None
        Maximum number of contact attempts. Inferred as ``max(d) - 1`` if None,
        which requires at least one nonrespondent.
    tol : float, default=1e-5
        EM stops when the log-likelihood increases by less than ``tol``.
    max_iter : int, default=10000

    Attributes
    ----------
    alphas_, beta_ : ndarray
        Attempt intercepts and shared slope.
    eta_ : float
        Probability of responding within ``m`` attempts.
    lambda_ : float
        Lagrange multiplier of the weight constraint.
    support_, weights_ : ndarray
        Estimated outcome distribution.
    estimate_ : FullEstimate
    """

    def __init__(self, basis="logy", m=None, tol=1e-5, max_iter=10000):
        self.basis = basis
        self.m = m
        self.tol = tol
        self.max_iter = max_iter

    def _basis(self) -> BasisSpec:
        return self.basis if isinstance(self.basis, BasisSpec) else BasisSpec.from_tokens(self.basis)

    def fit(self, X, y):
        """Fit on outcomes ``X`` (NaN for nonrespondents) and attempt indices ``y``."""
        data = check_callback_arrays(X, y, self.m)
        est = fit_em(data, self._basis(), tol=self.tol, max_iter=self.max_iter)
        self.estimate_ = est
        self.alphas_ = est.params.alphas.copy()
        self.beta_ = est.params.beta.copy()
        self.eta_ = est.eta
        self.lambda_ = est.lam
        self.support_ = est.dist.support.copy()
        self.weights_ = est.dist.weights.copy()
        self.loglik_ = est.loglik
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        return self

    def predict_proba(self, X):
        """``Pr(D = j | y)`` for ``j = 1..m`` and the never-respond probability as last column."""
        check_is_fitted(self, "estimate_")
        yv = np.asarray(X, dtype=float).ravel()
        probs = rho_matrix(yv, self.estimate_.params, self.estimate_.basis)
        return np.column_stack([probs, 1.0 - probs.sum(axis=1)])

    def cdf(self, y):
        check_is_fitted(self, "estimate_")
        return self.estimate_.dist.cdf(y)

    def quantile(self, tau):
        check_is_fitted(self, "estimate_")
        return self.estimate_.dist.quantile(tau)
