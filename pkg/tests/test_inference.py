import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

import _montecarlo as mc
from callback_ineq import functionals as fn
from callback_ineq import inference as inf
from callback_ineq.estimator import FittedDistribution, fit_em
from callback_ineq.exceptions import DomainError, SingularityError
from callback_ineq.model import BasisSpec, CallbackDataset, rho
from callback_ineq.simulation import SimDesign, generate_sample

LOG = BasisSpec(("logy",))
NONE = BasisSpec(())


@pytest.fixture(scope="module")
def fit():
    return fit_em(generate_sample(SimDesign(N=800, M=1, base_seed=3), 0), LOG, tol=1e-10)


@pytest.fixture(scope="module")
def sw(fit):
    return inf.Sandwich.from_fit(fit)


def fd_score(nu, data, basis, h=1e-6):
    nu = np.asarray(nu, float)
    out = np.empty((data.N, nu.size))
    for k in range(nu.size):
        step = h * max(1.0, abs(nu[k]))
        up, dn = nu.copy(), nu.copy()
        up[k] += step
        dn[k] -= step
        out[:, k] = (inf.h_contributions(up, data, basis) - inf.h_contributions(dn, data, basis)) / (2 * step)
    return out


# --------------------------------------------------------------------------
# score and Hessian


def test_score_components(fit):
    data = fit.data
    nu = fit.nu()
    U = inf.score_matrix(nu, data, LOG)
    eta, lam = fit.eta, fit.lam
    non = ~data.respondents
    assert np.allclose(U[non, -2], -1 / (1 - eta))
    assert np.allclose(U[non, :-2], 0) and np.allclose(U[non, -1], 0)
    r = np.array([rho(y, fit.params, LOG) for y in data.y_obs])
    assert np.allclose(U[data.respondents, -1], -(r - eta) / (1 + lam * (r - eta)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 1), min_size=2, max_size=2), st.floats(-1, 1), st.floats(0.3, 0.9),
       st.floats(-0.5, 0.5), st.integers(0, 10_000))
def test_score_matches_finite_differences(alphas, beta, eta, lam, seed):
    data = generate_sample(SimDesign(N=40, M=1, base_seed=seed), 0)
    nu = np.array(alphas + [beta, eta, lam])
    try:
        U = inf.score_matrix(nu, data, LOG)
    except DomainError:
        return
    num = fd_score(nu, data, LOG)
    assert np.allclose(U, num, rtol=1e-4, atol=1e-4 * np.maximum(1.0, np.abs(U)).max())


def test_score_sums_to_zero_at_tight_fit():
    data = generate_sample(SimDesign(N=600, M=1, base_seed=21), 0)
    f = fit_em(data, LOG, tol=1e-12)
    assert np.max(np.abs(inf.score_matrix(f.nu(), data, LOG).sum(0))) < 1e-4


def test_v_hat_symmetric_and_sized(sw, fit):
    V = sw.V
    assert V.shape == (fit.m + fit.d + 2,) * 2
    assert np.max(np.abs(V - V.T)) <= 1e-8


def test_v_hat_singular_raises():
    # log y is constant on the respondents, so beta is not identified
    data = CallbackDataset.from_arrays(np.full(20, 2.0), np.r_[np.ones(8, int), np.full(12, 2)], 10, 2)
    f = fit_em(data, NONE, tol=1e-10)
    nu = np.r_[f.params.alphas, 0.0, f.eta, f.lam]
    with pytest.raises(SingularityError) as e:
        inf.v_hat(data, nu, LOG)
    assert e.value.code == "E_CONDITION_C4"


def test_m_matrix_and_gamma():
    M = inf.m_matrix(4, 0.5)
    assert np.allclose(M[-2:, -2:], [[4, -0.5], [-0.5, 0]])
    assert np.allclose(M[:2], 0) and np.allclose(M[:, :2], 0)
    assert np.allclose(inf.gamma_hat(np.eye(4), 0.5), np.eye(4) + M)
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    V = A @ A.T + 5 * np.eye(5)
    G = inf.gamma_hat(V, 0.7)
    assert np.allclose(G, G.T)


# --------------------------------------------------------------------------
# distribution-function covariance


def test_sigma_cov_symmetry_and_edges(sw, fit):
    a, b = np.quantile(fit.dist.support, [0.3, 0.8])
    assert inf.sigma_cov(sw, None, a, b) == pytest.approx(inf.sigma_cov(sw, None, b, a), rel=1e-12)
    assert inf.sigma_cov(sw, None, fit.dist.support.min() / 2, a) == pytest.approx(0.0, abs=1e-15)
    S = inf.sigma_matrix(sw, None, [a, b])
    assert np.all(np.linalg.eigvalsh(S) >= -1e-12)


def test_full_response_first_term_is_weighted_covariance(sw, fit):
    """With rho = 1 and no parameter term, sigma_u reduces to b' cov_p(u) b."""
    flat = inf.Sandwich(fit, sw.V, np.zeros_like(sw.gamma), sw.v, np.ones_like(sw.rho))
    dist = fit.dist
    U = np.column_stack([uc(dist.support) for uc in fn.THEIL.u])
    g = dist.weights @ U
    C = np.cov(U.T, aweights=dist.weights, bias=True)
    b = fn.THEIL.grad(g)
    assert inf.uh_sigma(flat, None, fn.THEIL) == pytest.approx(b @ C @ b, rel=1e-10)


def test_constant_u_has_zero_variance(sw):
    spec = fn.UHSpec("one", (fn.constant(1.0),), lambda x: x[0], lambda x: np.array([1.0]))
    assert inf.uh_sigma(sw, None, spec) == pytest.approx(0.0, abs=1e-14)


# --------------------------------------------------------------------------
# density


def test_bandwidth_example():
    dist = FittedDistribution.uniform(np.exp(np.r_[np.full(500, -1.0), np.full(500, 1.0)]))
    assert inf.kde_bandwidth(dist) == pytest.approx(1.06 * 1000**-0.2, abs=1e-6)
    # the six-decimal constant 0.266261 is a rounding of the same arithmetic
    assert inf.kde_bandwidth(dist) == pytest.approx(0.266261, abs=1e-5)


def test_bandwidth_uniform_weights_classical_rule():
    rng = np.random.default_rng(7)
    y = rng.lognormal(size=333)
    t = np.log(y)
    iqr = np.quantile(t, 0.75, method="inverted_cdf") - np.quantile(t, 0.25, method="inverted_cdf")
    expected = 1.06 * t.size**-0.2 * min(t.std(), iqr / 1.34)
    assert inf.kde_bandwidth(FittedDistribution.uniform(y)) == pytest.approx(expected, rel=1e-12)


def test_bandwidth_fallback_when_iqr_zero():
    y = np.r_[np.ones(10), 5.0]
    dist = FittedDistribution.uniform(y)
    sd = np.log(y).std()
    assert inf.kde_bandwidth(dist) == pytest.approx(1.06 * 11**-0.2 * sd)
    with pytest.raises(DomainError):
        inf.kde_bandwidth(FittedDistribution.uniform(np.ones(4)))


def test_density_properties(fit):
    dist = fit.dist
    total, _ = integrate.quad(lambda y: inf.density(dist, y), 0, np.inf, limit=500)
    assert total == pytest.approx(1.0, abs=1e-6)
    grid = np.geomspace(1e-4, 50, 300)
    assert np.all(inf.density(dist, grid) >= 0)
    c, b = 2.5, 0.3
    atom = FittedDistribution.uniform(np.array([c]))
    assert inf.density(atom, c, bandwidth=b) == pytest.approx(1 / (b * math.sqrt(2 * math.pi) * c))


# --------------------------------------------------------------------------
# intervals


def test_z_and_width_scaling():
    assert inf.z_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    assert inf.z_value(0.9) == pytest.approx(1.644854, abs=1e-6)
    r1 = inf.wald("x", 1.0, 4.0, 100, 0.95)
    r2 = inf.wald("x", 1.0, 4.0, 400, 0.95)
    assert r1.length / r2.length == pytest.approx(2.0)
    assert r1.covers(1.0) and not r1.covers(2.0)
    assert inf.wald("x", 1.0, -1e-12, 10, 0.95).clamped


def test_quantile_omega_structure(sw):
    O = inf.quantile_omega(sw, None, 0.5, 0.5)
    assert O[0, 1] == pytest.approx(O[0, 0]) and O[1, 1] == pytest.approx(O[0, 0])
    O = inf.quantile_omega(sw, None, 0.25, 0.75)
    assert np.allclose(O, O.T)


def test_quantile_difference_variance(sw):
    r = inf.quantile_function_ci(sw, None, 0.5, 0.5, "difference")
    assert r.degenerate and r.length == 0
    O = inf.quantile_omega(sw, None, 0.75, 0.25)
    r = inf.quantile_function_ci(sw, None, 0.75, 0.25, "difference")
    assert r.se**2 == pytest.approx(O[0, 0] + O[1, 1] - 2 * O[0, 1], rel=1e-10)


def test_theil_gradient_and_single_atom():
    assert np.allclose(inf.theil_gradient((1.0, 0.0)), [-1, 1])
    data = CallbackDataset.from_arrays(np.full(12, 3.0), np.r_[np.ones(5, int), np.full(7, 2)], 8, 2)
    f = fit_em(data, NONE, tol=1e-10)
    r = inf.theil_ci(f, None)
    assert r.point == 0 and r.degenerate and r.length == 0


def test_gini_influence(fit):
    xi = inf.gini_influence(fit.dist)
    assert abs(np.dot(fit.dist.weights, xi[:, 0])) < 1e-12
    top = np.argmax(fit.dist.support)
    psi, _ = fn.gini_parts(fit.dist)
    assert xi[top, 1] == pytest.approx(2 * fit.dist.support[top] * 1.0 - 2 * psi)


def test_param_cis_names_and_order(sw, fit):
    reports = inf.param_cis(sw)
    assert [r.measure for r in reports] == ["alpha1", "alpha2", "beta[logy]", "eta"]
    for r, v in zip(reports, fit.nu()):
        assert r.point == pytest.approx(v) and r.ci_lower < v < r.ci_upper


def test_beta_interval_excludes_zero_at_large_n():
    design = SimDesign(N=5000, M=1, base_seed=99)
    excl = 0
    for rep in range(30):
        f = fit_em(generate_sample(design, rep), LOG)
        r = inf.param_cis(f)[2]
        excl += r.ci_upper < 0
    assert excl / 30 >= 0.95


# --------------------------------------------------------------------------
# Monte Carlo oracles on the exponential design


@pytest.mark.slow
def test_parameter_covariance_calibration():
    ex = mc.extras(2000, 2000)
    nu = np.array([e["nu"] for e in ex])
    emp = 2000 * nu.var(axis=0, ddof=1)
    robust = np.mean([e["nu_cov"] for e in ex], axis=0)
    assert np.all(np.abs(robust / emp - 1) <= 0.10), (robust, emp)


@pytest.mark.slow
def test_gamma_is_not_the_parameter_covariance():
    """Gamma is used inside the F-hat expansion only; as a covariance for eta-hat it is far too large."""
    ex = mc.extras(2000, 2000)
    nu = np.array([e["nu"] for e in ex])
    emp_eta = 2000 * nu[:, -1].var(ddof=1)
    gam_eta = np.mean([e["gamma"][-1] for e in ex])
    assert gam_eta / emp_eta > 2


@pytest.mark.slow
def test_sigma_cov_at_median_calibration():
    ex = mc.extras(2000, 2000)
    F = np.array([e["F_med"] for e in ex])
    emp = 2000 * F.var(ddof=1)
    pred = np.mean([e["sigma_med"] for e in ex])
    assert pred == pytest.approx(emp, rel=0.10)


@pytest.mark.slow
def test_quantile_omega_calibration():
    mets = mc.metrics(2000, 2000)
    ex = mc.extras(2000, 2000)
    emp = 2000 * mets[("q0.5", "Proposed")].sd_estimate ** 2
    pred = np.mean([e["omega_med"] for e in ex])
    assert pred == pytest.approx(emp, rel=0.15)


@pytest.mark.slow
def test_quantile_ratio_coverage():
    truth = mc.truths().quantiles[0.75] / mc.truths().quantiles[0.25]
    ex = mc.extras(1000, 500)
    cp = np.mean([lo <= truth <= hi for _, lo, hi in (e["ratio"] for e in ex)])
    assert 0.92 <= cp <= 0.98


@pytest.mark.slow
def test_theil_coverage_n2000():
    cp = mc.metrics(2000, 2000, first=500)[("theil", "Proposed")].cp
    assert 0.92 <= cp <= 0.97
