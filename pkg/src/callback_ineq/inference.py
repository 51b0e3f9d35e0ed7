"""Asymptotic variances and Wald intervals for the plug-in measures.

Every variance has the same two-part structure: a weighted second moment of
the measure's influence components divided by the response probability, plus
a correction ``A' Gamma A`` where ``A = E{v(Y) xi(Y)'}`` carries the
estimation error of the response model. ``Gamma`` is built from the Hessian of
the profiled objective in ``nu = (alpha, beta, eta, lambda)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import functionals as fn
from .estimator import FittedDistribution, FullEstimate
from .exceptions import DomainError, NumericError, SingularityError
from .model import BasisSpec, CallbackDataset, log_expit, v_vector

VAR_SLACK = 1e-10
COND_LIMIT = 1e12


def _split(nu, m, d):
    nu = np.asarray(nu, dtype=float)
    if nu.size != m + d + 2:
        raise DomainError(f"nu must have length m + d + 2 = {m + d + 2}")
    return nu[:m], nu[m:m + d], float(nu[m + d]), float(nu[m + d + 1])


def _respondent_terms(nu, y_obs, d_obs, m, basis):
    alphas, beta, eta, lam = _split(nu, m, basis.d)
    Q = basis.evaluate(y_obs)
    lp = alphas[None, :] + (Q @ beta)[:, None]
    lpos, lneg = log_expit(lp), log_expit(-lp)
    k = np.arange(m)[None, :]
    S = (k == (d_obs - 1)[:, None]).astype(float)
    R = (k <= (d_obs - 1)[:, None]).astype(float)
    never = np.exp(lneg.sum(axis=1))
    r = 1.0 - never
    a = r - eta
    denom = 1.0 + lam * a
    if np.any(denom <= 0):
        raise DomainError("1 + lambda (rho - eta) must be positive for every respondent")
    return dict(Q=Q, pi=np.exp(lpos), lpos=lpos, lneg=lneg, S=S, R=R, r=r, never=never, a=a, denom=denom,
                eta=eta, lam=lam)


def h_contributions(nu, data: CallbackDataset, basis: BasisSpec) -> np.ndarray:
    """Per-record values ``H_i(nu)``, length N in record order."""
    m = data.m
    t = _respondent_terms(nu, data.y_obs, data.d_obs, m, basis)
    eta = t["eta"]
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    out = np.full(data.N, np.log1p(-eta))
    out[data.respondents] = (t["S"] * t["lpos"]).sum(1) + ((t["R"] - t["S"]) * t["lneg"]).sum(1) - np.log(t["denom"])
    return out


def score_matrix(nu, data: CallbackDataset, basis: BasisSpec) -> np.ndarray:
    """Analytic gradients of ``H_i``, shape ``(N, m + d + 2)``."""
    m, dq = data.m, basis.d
    t = _respondent_terms(nu, data.y_obs, data.d_obs, m, basis)
    eta, lam = t["eta"], t["lam"]
    if not 0 < eta < 1:
        raise DomainError("eta must lie in (0, 1)")
    pi, Q = t["pi"], t["Q"]
    c = (lam / t["denom"])[:, None]
    # d rho / d alpha_l = (1 - rho) pi_l
    drho_a = t["never"][:, None] * pi
    g_alpha = (t["S"] - t["R"] * pi) - c * drho_a
    g_beta = g_alpha.sum(axis=1, keepdims=True) * Q
    out = np.zeros((data.N, m + dq + 2))
    resp = data.respondents
    out[np.ix_(resp, np.arange(m))] = g_alpha
    out[np.ix_(resp, np.arange(m, m + dq))] = g_beta
    out[resp, m + dq] = c[:, 0]
    out[resp, m + dq + 1] = -t["a"] / t["denom"]
    out[~resp, m + dq] = -1.0 / (1.0 - eta)
    return out


def score_Hi(nu, record, m: int, basis: BasisSpec) -> np.ndarray:
    """Gradient of a single record's ``H_i``; ``record`` is ``(y, d)`` with y NaN if d = m + 1."""
    y, d = record
    data = CallbackDataset(np.array([y], dtype=float), np.array([d]), m)
    return score_matrix(nu, data, basis)[0]


def v_hat(data: CallbackDataset, nu_hat, basis: BasisSpec) -> np.ndarray:
    """``-N^{-1}`` times the Hessian of ``H``, by central differences of the analytic score."""
    nu_hat = np.asarray(nu_hat, dtype=float)
    K = nu_hat.size
    J = np.empty((K, K))
    for k in range(K):
        h = 1e-5 * max(1.0, abs(nu_hat[k]))
        up, dn = nu_hat.copy(), nu_hat.copy()
        up[k] += h
        dn[k] -= h
        J[:, k] = (score_matrix(up, data, basis).sum(0) - score_matrix(dn, data, basis).sum(0)) / (2 * h)
    V = -J / data.N
    V = 0.5 * (V + V.T)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularityError(f"V is numerically singular (condition number {cond:.3g}); condition C4 fails")
    return V


def m_matrix(K: int, eta: float) -> np.ndarray:
    M = np.zeros((K, K))
    M[K - 2, K - 2] = 2.0 / (1.0 - eta)
    M[K - 2, K - 1] = M[K - 1, K - 2] = -eta
    return M


def gamma_hat(V, eta: float) -> np.ndarray:
    """``V^{-1} + V^{-1} M V^{-1}``."""
    V = np.asarray(V, dtype=float)
    try:
        Vi = np.linalg.inv(V)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("V is singular; condition C4 fails") from exc
    G = Vi + Vi @ m_matrix(V.shape[0], eta) @ Vi
    return 0.5 * (G + G.T)


@dataclass
class Sandwich:
    """Fitted quantities shared by every variance computation for one fit."""

    fit: FullEstimate
    V: np.ndarray
    gamma: np.ndarray
    v: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)

    @classmethod
    def from_fit(cls, fit: FullEstimate) -> "Sandwich":
        V = v_hat(fit.data, fit.nu(), fit.basis)
        G = gamma_hat(V, fit.eta)
        v = v_vector(fit.dist.support, fit.params, fit.eta, fit.basis)
        v = np.atleast_2d(v)
        rho = 1.0 / v[:, -2]
        return cls(fit, V, G, v, rho)

    @property
    def N(self) -> int:
        return self.fit.N

    def covariance(self, xi) -> np.ndarray:
        """Plug-in ``E{xi xi'/rho} + E{xi v'} Gamma E{v xi'}`` for influence columns ``xi``."""
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            xi = xi[:, None]
        p = self.fit.dist.weights
        first = (xi * (p / self.rho)[:, None]).T @ xi
        A = (self.v * p[:, None]).T @ xi
        out = first + A.T @ self.gamma @ A
        return 0.5 * (out + out.T)

    def nu_cov(self) -> np.ndarray:
        """Robust covariance ``V^{-1} J V^{-1}`` of ``sqrt(N) (nu_hat - nu)``.

        ``J`` is the mean outer product of the per-record scores. Gamma is
        the right matrix inside the distribution-function expansion but not the
        covariance of ``nu_hat`` (its ``eta`` entry is several times too large).
        """
        fit = self.fit
        U = score_matrix(fit.nu(), fit.data, fit.basis)
        J = U.T @ U / fit.N
        Vi = np.linalg.inv(self.V)
        out = Vi @ J @ Vi
        return 0.5 * (out + out.T)


def sandwich(fit: FullEstimate) -> Sandwich:
    return Sandwich.from_fit(fit)


def _as_sandwich(fit, gamma):
    if isinstance(fit, Sandwich):
        return fit
    sw = Sandwich.from_fit(fit)
    if gamma is not None:
        sw.gamma = np.asarray(gamma, dtype=float)
    return sw


def sigma_matrix(fit, gamma, ys) -> np.ndarray:
    """Plug-in covariance of the limiting process of ``sqrt(N)(F_hat - F)`` at the points ``ys``."""
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    xi = (dist.support[:, None] <= ys[None, :]).astype(float) - np.atleast_1d(dist.cdf(ys))[None, :]
    return sw.covariance(xi)


def sigma_cov(fit, gamma, y1: float, y2: float) -> float:
    return float(sigma_matrix(fit, gamma, [y1, y2])[0, 1])


# --------------------------------------------------------------------------
# density on the log scale


def _log_distribution(dist: FittedDistribution) -> FittedDistribution:
    if np.any(dist.support <= 0):
        raise DomainError("log-scale density needs positive support")
    return FittedDistribution(np.log(dist.support), dist.weights)


def kde_bandwidth(dist: FittedDistribution) -> float:
    """Silverman-type bandwidth on ``log Y`` using the weighted IQR and SD."""
    ld = _log_distribution(dist)
    iqr = ld.quantile(0.75) - ld.quantile(0.25)
    var = fn.uh_measure(ld, fn.centered_moment(2))
    sd = np.sqrt(max(var, 0.0))
    a, b = iqr / 1.34, sd
    scale = min(a, b)
    if scale <= 0:
        scale = max(a, b)
    if scale <= 0:
        raise DomainError("degenerate distribution: both IQR and SD of log(Y) are zero")
    return float(1.06 * dist.n ** (-0.2) * scale)


def density(dist: FittedDistribution, y, bandwidth: float | None = None):
    """``k_hat(log y) / y`` with a weighted Gaussian KDE ``k_hat`` of ``log Y``."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DomainError("density is defined for y > 0 only")
    b = kde_bandwidth(dist) if bandwidth is None else float(bandwidth)
    t = np.log(np.atleast_1d(y))
    z = (t[:, None] - np.log(dist.support)[None, :]) / b
    k = (np.exp(-0.5 * z * z) @ dist.weights) / (b * np.sqrt(2 * np.pi))
    out = k / np.exp(t)
    return float(out[0]) if y.ndim == 0 else out


# --------------------------------------------------------------------------
# reports


def z_value(level: float) -> float:
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    return float(ndtri(0.5 + level / 2.0))


@dataclass
class EstimateReport:
    """Point estimate with Wald interval.

    ``se`` is the estimated asymptotic standard deviation of
    ``sqrt(N)(estimate - truth)``; the interval is
    ``point +- z * se / sqrt(N)``.
    """

    measure: str
    point: float
    se: float
    ci_lower: float
    ci_upper: float
    level: float
    N: int
    degenerate: bool = False
    clamped: bool = False

    @property
    def standard_error(self) -> float:
        return self.se / np.sqrt(self.N)

    @property
    def length(self) -> float:
        return self.ci_upper - self.ci_lower

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def as_dict(self) -> dict:
        return {"measure": self.measure, "estimate": self.point, "se": self.se,
                "std_error": self.standard_error, "ci_lower": self.ci_lower,
                "ci_upper": self.ci_upper, "level": self.level, "degenerate": self.degenerate,
                "variance_clamped": self.clamped}


def _clamp_var(var: float) -> tuple[float, bool]:
    if not np.isfinite(var):
        raise NumericError("variance estimate is not finite")
    if var < -VAR_SLACK:
        raise NumericError(f"negative variance estimate {var:.3g}")
    if var < 0:
        return 0.0, True
    return float(var), False


def wald(measure: str, point: float, var: float, N: int, level: float) -> EstimateReport:
    var, clamped = _clamp_var(var)
    se = np.sqrt(var)
    half = z_value(level) * se / np.sqrt(N)
    return EstimateReport(measure, float(point), float(se), float(point - half), float(point + half), level, N,
                          degenerate=bool(se == 0.0), clamped=clamped)


def quantile_omega(fit, gamma, tau1: float, tau2: float, bandwidth: float | None = None) -> np.ndarray:
    """Plug-in asymptotic covariance of the two quantile estimators."""
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    q = np.array([dist.quantile(tau1), dist.quantile(tau2)])
    f = np.atleast_1d(density(dist, q, bandwidth))
    if np.any(f <= 1e-12):
        raise DomainError("estimated density vanishes at the quantile; choose a different tau")
    S = sigma_matrix(sw, None, q)
    Dinv = np.diag(1.0 / f)
    out = Dinv @ S @ Dinv
    return 0.5 * (out + out.T)


def quantile_ci(fit, gamma, tau: float, level: float = 0.95) -> EstimateReport:
    sw = _as_sandwich(fit, gamma)
    omega = quantile_omega(sw, None, tau, tau)
    return wald(f"quantile({tau:g})", sw.fit.dist.quantile(tau), omega[0, 0], sw.N, level)


def quantile_function_ci(fit, gamma, tau1: float, tau2: float, g: str = "difference",
                         level: float = 0.95) -> EstimateReport:
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    q1, q2 = dist.quantile(tau1), dist.quantile(tau2)
    if g == "difference":
        b = np.array([1.0, -1.0])
    elif g == "ratio":
        if q2 == 0:
            raise DomainError("quantile ratio with zero denominator")
        b = np.array([1.0 / q2, -q1 / q2**2])
    else:
        raise DomainError(f"unknown quantile function {g!r}")
    omega = quantile_omega(sw, None, tau1, tau2)
    point = fn.quantile_function(dist, tau1, tau2, g)
    return wald(f"quantile_{g}({tau1:g},{tau2:g})", point, float(b @ omega @ b), sw.N, level)


def uh_sigma(fit, gamma, spec: fn.UHSpec) -> float:
    """Asymptotic variance ``b' Sigma_u b`` of ``h(gamma_u)``."""
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    U = np.column_stack([uc(dist.support) for uc in spec.u])
    gam = dist.weights @ U
    b = np.asarray(spec.grad(gam), dtype=float)
    if not np.all(np.isfinite(b)):
        raise DomainError(f"gradient of {spec.name} undefined at the estimate")
    return float(b @ sw.covariance(U - gam[None, :]) @ b)


def uh_ci(fit, gamma, spec: fn.UHSpec, level: float = 0.95) -> EstimateReport:
    sw = _as_sandwich(fit, gamma)
    return wald(spec.name, fn.uh_measure(sw.fit.dist, spec), uh_sigma(sw, None, spec), sw.N, level)


def theil_gradient(gamma_u) -> np.ndarray:
    g1, g2 = gamma_u
    return np.array([-g2 / g1 - 1.0, 1.0]) / g1


def theil_ci(fit, gamma, level: float = 0.95) -> EstimateReport:
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    if np.unique(dist.support).size == 1:
        return wald("theil", 0.0, 0.0, sw.N, level)
    return wald("theil", fn.theil(dist), uh_sigma(sw, None, fn.THEIL), sw.N, level)


def gini_influence(dist: FittedDistribution) -> np.ndarray:
    """Columns ``(Y - mu, 2{Y F(Y) + sum_{Y_j > Y} p_j Y_j} - 2 psi)`` at the support points."""
    psi, mu = fn.gini_parts(dist)
    s, p = dist.support, dist.weights
    order = np.argsort(s, kind="stable")
    ss, ps = s[order], (p * s)[order]
    # mass of p_j Y_j at or below each sorted point, ties included
    upto = np.cumsum(ps)
    last_tie = np.searchsorted(ss, ss, side="right") - 1
    tail_sorted = upto[-1] - upto[last_tie]
    tail = np.empty_like(tail_sorted)
    tail[order] = tail_sorted
    F = dist.cdf_at_support()
    return np.column_stack([s - mu, 2.0 * (s * F + tail) - 2.0 * psi])


def gini_ci(fit, gamma, level: float = 0.95) -> EstimateReport:
    sw = _as_sandwich(fit, gamma)
    dist = sw.fit.dist
    psi, mu = fn.gini_parts(dist)
    b = np.array([-psi / mu, 1.0]) / mu
    var = float(b @ sw.covariance(gini_influence(dist)) @ b)
    return wald("gini", psi / mu - 1.0, var, sw.N, level)


def param_cis(fit, level: float = 0.95) -> list[EstimateReport]:
    """Wald intervals for the intercepts, slopes and ``eta`` from :meth:`Sandwich.nu_cov`."""
    sw = _as_sandwich(fit, None)
    m = sw.fit.m
    nu = sw.fit.nu()
    cov = sw.nu_cov()
    names = [f"alpha{j + 1}" for j in range(m)] + [f"beta[{t}]" for t in sw.fit.basis.terms] + ["eta"]
    return [wald(name, nu[k], cov[k, k], sw.N, level) for k, name in enumerate(names)]
