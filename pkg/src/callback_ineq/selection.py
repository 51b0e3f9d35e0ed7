"""AIC/BIC comparison of response-model bases."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from scipy.optimize import minimize

from .estimator import FullEstimate, fit_em, profile_loglik, solve_lambda_rho
from .exceptions import CallbackIneqError, DomainError, SelectionError
from .inference import score_matrix
from .model import BasisSpec, CallbackDataset, ModelParams, candidate_bases, rho_matrix

CRITERIA = ("aic", "bic")
# EM only warm-starts the profile polish, so a loose tolerance suffices
SELECTION_TOL = 1e-2


@dataclass
class SelectionRow:
    basis: BasisSpec
    k: int
    loglik: float
    aic: float
    bic: float
    converged: bool
    message: str = ""
    rank: int | None = None

    def as_dict(self) -> dict:
        out = asdict(self)
        out["basis"] = self.basis.label
        return out


def maximize_profile(fit: FullEstimate, gtol: float = 1e-7) -> float:
    """Polish an EM fit by quasi-Newton ascent of the profile log-likelihood.

    EM is slow when the basis is badly scaled (``y^2`` terms), and selection
    compares log-likelihoods across nested bases, so each fit is driven to the
    actual maximum. The gradient is the summed analytic score with ``lambda``
    re-solved at every point (its own score entry is then zero). Returns the
    larger of the polished and the EM profile values.
    """
    data, basis, m = fit.data, fit.basis, fit.m
    N = data.N
    x0 = np.append(fit.params.to_vector(), fit.eta)
    start = fit.profile_loglik

    def objective(x):
        params = ModelParams.from_vector(x[:-1], m)
        eta = x[-1]
        if not 0 < eta < 1:
            return np.inf, np.zeros_like(x)
        try:
            r = rho_matrix(data.y_obs, params, basis).sum(axis=1)
            lam = solve_lambda_rho(r, eta)
            val = profile_loglik(params, eta, data, basis, lam=lam)
            grad = score_matrix(np.append(x, lam), data, basis).sum(axis=0)[:-1]
        except (CallbackIneqError, FloatingPointError):
            return np.inf, np.zeros_like(x)
        return -val / N, -grad / N

    with np.errstate(over="ignore", invalid="ignore"):
        res = minimize(objective, x0, jac=True, method="BFGS", options={"gtol": gtol / N, "maxiter": 500})
    best_val = -res.fun * N if np.isfinite(res.fun) else -np.inf
    return float(max(best_val, start))


def information_criteria(data: CallbackDataset, basis: BasisSpec, tol: float = SELECTION_TOL,
                         max_iter: int = 10000) -> SelectionRow:
    """Fit one basis and score it; ``k = m + d + 1`` counts alphas, betas and eta.

    The log-likelihood is the profile form (EM log-likelihood plus ``n log n``),
    maximized by EM and then polished with :func:`maximize_profile`.
    """
    k = data.m + basis.d + 1
    try:
        fit = fit_em(data, basis, tol=tol, max_iter=max_iter)
    except CallbackIneqError as exc:
        return SelectionRow(basis, k, math.nan, math.nan, math.nan, False, f"{type(exc).__name__}: {exc}")
    ll = maximize_profile(fit)
    msg = "" if fit.converged else "EM did not converge"
    return SelectionRow(basis, k, ll, -2 * ll + 2 * k, -2 * ll + k * math.log(data.N), fit.converged, msg)


def _dedupe(candidates) -> list[BasisSpec]:
    seen, out = set(), []
    for c in candidates:
        b = c if isinstance(c, BasisSpec) else BasisSpec.from_tokens(c)
        if b not in seen:
            seen.add(b)
            out.append(b)
    return out


def rank_rows(rows: list[SelectionRow], criterion: str = "aic") -> list[SelectionRow]:
    """Order by criterion, then fewer terms, then basis label; failed fits go last unranked."""
    if criterion not in CRITERIA:
        raise DomainError(f"criterion must be one of {CRITERIA}")
    ok = [r for r in rows if r.converged and np.isfinite(getattr(r, criterion))]
    bad = [r for r in rows if r not in ok]
    ok.sort(key=lambda r: (getattr(r, criterion), r.basis.d, r.basis.label))
    bad.sort(key=lambda r: (r.basis.d, r.basis.label))
    for i, r in enumerate(ok, 1):
        r.rank = i
    for r in bad:
        r.rank = None
    return ok + bad


def select_basis(data: CallbackDataset, candidates=None, criterion: str = "aic",
                 tol: float = SELECTION_TOL) -> list[SelectionRow]:
    """Score every candidate basis and return the rows ranked by ``criterion``.

    Raises
    ------
    SelectionError
        If no candidate fit converges.
    """
    if criterion not in CRITERIA:
        raise DomainError(f"criterion must be one of {CRITERIA}")
    data.check_response_condition()
    cands = _dedupe(candidate_bases() if candidates is None else candidates)
    if not cands:
        raise SelectionError("no candidate bases")
    rows = [information_criteria(data, b, tol=tol) for b in cands]
    if not any(r.converged for r in rows):
        raise SelectionError("no candidate basis produced a converged fit")
    return rank_rows(rows, criterion)


def best(rows: list[SelectionRow], criterion: str) -> SelectionRow:
    ok = [r for r in rows if r.converged and np.isfinite(getattr(r, criterion))]
    if not ok:
        raise SelectionError("no converged rows")
    return min(ok, key=lambda r: (getattr(r, criterion), r.basis.d, r.basis.label))
