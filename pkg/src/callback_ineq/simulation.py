"""Monte Carlo designs, baselines and bias/coverage summaries."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from . import functionals as fn
from . import inference as inf
from .estimator import FittedDistribution, fit_em
from .exceptions import CallbackIneqError, DataError, DomainError, NumericError
from .model import BasisSpec, CallbackDataset, ModelParams, expit, rho_matrix

METHODS = ("CC", "Proposed", "Ideal")
UNRELIABLE_FAILURE_RATE = 0.05


@dataclass(frozen=True)
class OutcomeDist:
    """Gamma-family outcome law (exponential and chi-squared are special cases)."""

    kind: str
    shape: float
    rate: float
    label: str = ""

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError("shape and rate must be positive")

    @classmethod
    def exponential(cls, rate: float = 1.0):
        return cls("exponential", 1.0, rate, f"Exp({rate:g})")

    @classmethod
    def chi_squared(cls, df: float):
        return cls("chisquared", df / 2.0, 0.5, f"ChiSq({df:g})")

    @classmethod
    def gamma(cls, shape: float, rate: float):
        return cls("gamma", shape, rate, f"Gam({shape:g},{rate:g})")

    @classmethod
    def from_dict(cls, spec: dict):
        kind = spec["kind"].lower()
        if kind in ("exp", "exponential"):
            return cls.exponential(spec.get("rate", 1.0))
        if kind in ("chisq", "chisquared", "chi2"):
            return cls.chi_squared(spec["df"])
        if kind == "gamma":
            return cls.gamma(spec["shape"], spec["rate"])
        raise DomainError(f"unknown outcome distribution {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "exponential":
            return {"kind": "exponential", "rate": self.rate}
        if self.kind == "chisquared":
            return {"kind": "chisquared", "df": 2 * self.shape}
        return {"kind": "gamma", "shape": self.shape, "rate": self.rate}

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.standard_gamma(self.shape, size) / self.rate

    def pdf(self, y):
        a, r = self.shape, self.rate
        y = np.asarray(y, dtype=float)
        return np.exp(a * np.log(r) + (a - 1) * np.log(y) - r * y - special.gammaln(a))

    def cdf(self, y):
        return special.gammainc(self.shape, self.rate * np.asarray(y, dtype=float))

    def ppf(self, tau):
        if self.kind == "exponential":
            return -np.log1p(-np.asarray(tau, dtype=float)) / self.rate
        return special.gammaincinv(self.shape, np.asarray(tau, dtype=float)) / self.rate


@dataclass(frozen=True)
class SimDesign:
    outcome: OutcomeDist = field(default_factory=OutcomeDist.exponential)
    N: int = 1000
    M: int = 500
    alphas: tuple = (-1.5, 0.5)
    beta: tuple = (-0.5,)
    basis: BasisSpec = field(default_factory=lambda: BasisSpec(("logy",)))
    taus: tuple = (0.25, 0.5, 0.75)
    ci_level: float = 0.95
    base_seed: int = 20240101
    tol: float = 1e-5

    def __post_init__(self):
        if self.N < 10:
            raise DomainError("N must be at least 10")
        if self.M < 1:
            raise DomainError("M must be at least 1")
        if len(self.beta) != self.basis.d:
            raise DomainError("beta length must match the basis")
        if not all(np.isfinite(self.alphas)) or not all(np.isfinite(self.beta)):
            raise DomainError("design parameters must be finite")
        if not all(0 < t < 1 for t in self.taus):
            raise DomainError("taus must lie in (0, 1)")

    @property
    def m(self) -> int:
        return len(self.alphas)

    @property
    def params(self) -> ModelParams:
        return ModelParams(np.array(self.alphas), np.array(self.beta))

    @property
    def measures(self) -> tuple:
        return tuple(f"q{t:g}" for t in self.taus) + ("theil", "gini")

    @classmethod
    def from_dict(cls, cfg: dict) -> "SimDesign":
        cfg = dict(cfg)
        if "outcome" in cfg:
            cfg["outcome"] = OutcomeDist.from_dict(cfg["outcome"])
        if "basis" in cfg:
            cfg["basis"] = BasisSpec.from_tokens(cfg["basis"])
        for key in ("alphas", "beta", "taus"):
            if key in cfg:
                cfg[key] = tuple(float(v) for v in cfg[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise DataError(f"unknown design keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["outcome"] = self.outcome.to_dict()
        out["basis"] = self.basis.token
        for key in ("alphas", "beta", "taus"):
            out[key] = list(out[key])
        return out


def replication_rng(base_seed: int, rep: int) -> np.random.Generator:
    """Independent stream per ``(base_seed, rep)`` via seed-sequence spawning keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(base_seed), int(rep)])))


def generate_full(design: SimDesign, rep: int) -> tuple[CallbackDataset, np.ndarray]:
    """Simulated callback dataset plus the complete outcome vector."""
    if not 0 <= rep:
        raise DomainError("rep must be nonnegative")
    rng = replication_rng(design.base_seed, rep)
    y = design.outcome.sample(rng, design.N)
    u = rng.random((design.N, design.m))
    pi = expit(np.asarray(design.alphas)[None, :] + (design.basis.evaluate(y) @ np.asarray(design.beta))[:, None])
    d = np.full(design.N, design.m + 1)
    pending = np.ones(design.N, dtype=bool)
    for j in range(design.m):
        hit = pending & (u[:, j] < pi[:, j])
        d[hit] = j + 1
        pending &= ~hit
    return CallbackDataset(np.where(pending, np.nan, y), d, design.m), y


def generate_sample(design: SimDesign, rep: int) -> CallbackDataset:
    return generate_full(design, rep)[0]


def cc_fit(data: CallbackDataset) -> FittedDistribution:
    """Complete-case distribution: uniform weights on the respondents."""
    if data.n == 0:
        raise DataError("no respondents")
    return FittedDistribution.uniform(data.y_obs)


def ideal_fit(full_outcomes) -> FittedDistribution:
    return FittedDistribution.uniform(full_outcomes)


# --------------------------------------------------------------------------
# truths


@dataclass
class TrueValues:
    pr_attempt: np.ndarray
    nonresponse: float
    quantiles: dict
    theil: float
    gini: float
    closed_form: dict = field(default_factory=dict)

    def measure(self, tag: str) -> float:
        if tag.startswith("q"):
            return self.quantiles[float(tag[1:])]
        return {"theil": self.theil, "gini": self.gini}[tag]

    def as_dict(self) -> dict:
        out = {f"Pr(D={j + 1})": float(v) for j, v in enumerate(self.pr_attempt)}
        out["nonresponse"] = self.nonresponse
        out.update({f"q{t:g}": v for t, v in self.quantiles.items()})
        out["theil"] = self.theil
        out["gini"] = self.gini
        return out


def _integrate(f, lo, hi, split, what, tol=1e-10):
    """``quad`` over ``(lo, hi)`` split at ``split`` so a singular density at 0 stays tame."""
    total, err_total = 0.0, 0.0
    for a, b in ((lo, split), (split, hi)):
        val, err = integrate.quad(f, a, b, limit=400, epsabs=1e-13, epsrel=1e-11)
        total += val
        err_total += err
    if not np.isfinite(total) or err_total > tol:
        raise NumericError(f"quadrature for {what} did not converge (error estimate {err_total:.2e})")
    return total


def true_values(design: SimDesign) -> TrueValues:
    """Response probabilities and inequality measures under the design, by quadrature.

    Quantiles, Theil and Gini are cross-checked against gamma-family closed forms;
    a disagreement beyond 1e-8 raises :class:`NumericError`.
    """
    dist, params, basis = design.outcome, design.params, design.basis
    med = float(dist.ppf(0.5))

    def over_support(f, what):
        return _integrate(f, 0.0, np.inf, med, what)

    pr_attempt = np.array([
        over_support(lambda y, j=j: rho_matrix(np.array([y]), params, basis)[0, j] * dist.pdf(y), f"Pr(D={j + 1})")
        for j in range(design.m)
    ])
    quantiles = {}
    for t in design.taus:
        closed = float(dist.ppf(t))
        root = optimize.brentq(lambda q: _integrate(dist.pdf, 0.0, q, 0.5 * q, "cdf") - t,
                               1e-12, 50.0 * closed + 50.0, xtol=1e-13)
        if abs(root - closed) > 1e-8 * max(1.0, closed):
            raise NumericError(f"quantile {t}: quadrature {root} disagrees with closed form {closed}")
        quantiles[t] = root
    mu = over_support(lambda y: y * dist.pdf(y), "mean")
    ylogy = over_support(lambda y: y * np.log(y) * dist.pdf(y) if y > 0 else 0.0, "E[Y log Y]")
    theil = ylogy / mu - math.log(mu)
    psi = over_support(lambda y: 2 * y * dist.cdf(y) * dist.pdf(y), "psi")
    gini = psi / mu - 1.0
    a = dist.shape
    closed = {
        "theil": float(special.digamma(a + 1) - math.log(a)),
        "gini": float(math.exp(special.gammaln(a + 0.5) - special.gammaln(a + 1)) / math.sqrt(math.pi)),
    }
    for key, val in (("theil", theil), ("gini", gini)):
        if abs(val - closed[key]) > 1e-8:
            raise NumericError(f"{key}: quadrature {val} disagrees with closed form {closed[key]}")
    return TrueValues(pr_attempt, float(1.0 - pr_attempt.sum()), quantiles, theil, gini, closed)


# --------------------------------------------------------------------------
# Monte Carlo


def _measures(dist: FittedDistribution, taus) -> dict:
    out = {f"q{t:g}": dist.quantile(t) for t in taus}
    out["theil"] = fn.theil(dist)
    out["gini"] = fn.gini(dist)
    return out


def _proposed(data: CallbackDataset, design: SimDesign):
    fit = fit_em(data, design.basis, tol=design.tol)
    sw = inf.Sandwich.from_fit(fit)
    reports = {f"q{t:g}": inf.quantile_ci(sw, None, t, design.ci_level) for t in design.taus}
    reports["theil"] = inf.theil_ci(sw, None, design.ci_level)
    reports["gini"] = inf.gini_ci(sw, None, design.ci_level)
    return {k: (r.point, r.ci_lower, r.ci_upper, r.standard_error) for k, r in reports.items()}, sw


def replicate(design: SimDesign, rep: int, methods=METHODS, extra=None) -> dict:
    """One replication: ``{method: {measure: (estimate, lower, upper, se)} or error string}``.

    ``extra(sandwich, data, y_full)``, if given, runs after a successful
    Proposed fit and its return value is stored under ``"extra"``; it lets
    callers collect further per-replication quantities without refitting.
    """
    data, y_full = generate_full(design, rep)
    out = {}
    for method in methods:
        try:
            if method == "CC":
                vals = _measures(cc_fit(data), design.taus)
                out[method] = {k: (v, None, None, None) for k, v in vals.items()}
            elif method == "Ideal":
                vals = _measures(ideal_fit(y_full), design.taus)
                out[method] = {k: (v, None, None, None) for k, v in vals.items()}
            elif method == "Proposed":
                out[method], sw = _proposed(data, design)
                if extra is not None:
                    out["extra"] = extra(sw, data, y_full)
            else:
                raise DomainError(f"unknown method {method!r}")
        except (CallbackIneqError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[method] = f"{type(exc).__name__}: {exc}"
    return out


def _replicate_star(args):
    return replicate(*args)


def simulate_replications(design: SimDesign, methods=METHODS, threads: int = 1, reps=None, extra=None) -> list[dict]:
    """Run replications in rep order; result order never depends on scheduling.

    ``extra`` must be picklable (a module-level function) when ``threads > 1``.
    """
    reps = list(range(design.M)) if reps is None else list(reps)
    jobs = [(design, r, tuple(methods), extra) for r in reps]
    if threads <= 1 or len(jobs) == 1:
        return [replicate(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(_replicate_star, jobs, chunksize=max(1, len(jobs) // (8 * threads))))


@dataclass
class MetricsRow:
    measure: str
    method: str
    truth: float
    rb: float
    rmse: float
    cp: float | None
    al: float | None
    failures: int
    replications: int
    unreliable: bool = False
    mean_se: float | None = None
    sd_estimate: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def metrics(estimates, truth: float, intervals=None) -> tuple[float, float, float | None, float | None]:
    """RB, RMSE, CP and AL for a vector of estimates (and optional ``(lower, upper)`` pairs)."""
    if abs(truth) < 1e-12:
        raise DomainError("relative bias undefined for a zero true value")
    est = np.asarray(estimates, dtype=float)
    rb = float(np.mean((est - truth) / truth))
    rmse = float(np.sqrt(np.mean((est - truth) ** 2)))
    cp = al = None
    if intervals is not None:
        lo, hi = np.asarray(intervals, dtype=float).T
        cp = float(np.mean((lo <= truth) & (truth <= hi)))
        al = float(np.mean(hi - lo))
    return rb, rmse, cp, al


def summarize(results: list[dict], truths: TrueValues, measures, methods=METHODS) -> list[MetricsRow]:
    rows = []
    total = len(results)
    for measure in measures:
        truth = truths.measure(measure)
        for method in methods:
            ok = [r[method][measure] for r in results if isinstance(r.get(method), dict)]
            failures = total - len(ok)
            if not ok:
                rows.append(MetricsRow(measure, method, truth, np.nan, np.nan, None, None, failures, total, True))
                continue
            est = np.array([o[0] for o in ok])
            has_ci = ok[0][1] is not None
            ivals = [(o[1], o[2]) for o in ok] if has_ci else None
            rb, rmse, cp, al = metrics(est, truth, ivals)
            row = MetricsRow(measure, method, truth, rb, rmse, cp, al, failures, total,
                             unreliable=failures > UNRELIABLE_FAILURE_RATE * total,
                             sd_estimate=float(est.std(ddof=1)) if est.size > 1 else None)
            if has_ci:
                row.mean_se = float(np.mean([o[3] for o in ok]))
            rows.append(row)
    return rows


def run_monte_carlo(design: SimDesign, methods=METHODS, measures=None, threads: int = 1) -> list[MetricsRow]:
    measures = design.measures if measures is None else tuple(measures)
    results = simulate_replications(design, methods, threads)
    return summarize(results, true_values(design), measures, methods)


def reference_designs(N: int = 1000, M: int = 500, base_seed: int = 20240101) -> dict:
    """The three outcome laws of the simulation study with the shared response model."""
    laws = {
        "Exp(1)": OutcomeDist.exponential(1.0),
        "ChiSq(1.5)": OutcomeDist.chi_squared(1.5),
        "Gam(0.8,0.25)": OutcomeDist.gamma(0.8, 0.25),
    }
    return {k: SimDesign(outcome=v, N=N, M=M, base_seed=base_seed) for k, v in laws.items()}
