import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize
from scipy.special import expit

from pomi import glm
from pomi.samplers import make_rng


def _logistic_data(n=400, beta=(-0.5, 1.0, -0.7), seed=0):
    rng = make_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, len(beta) - 1))])
    y = (rng.random(n) < expit(X @ np.array(beta))).astype(float)
    return X, y


def _multinomial_data(n=600, seed=1):
    rng = make_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    B = np.array([[0.3, 1.0, -0.5], [-0.4, -0.6, 0.8]])
    eta = np.column_stack([np.zeros(n), X @ B.T])
    P = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    y = np.array([rng.choice(3, p=p) for p in P], dtype=float) + 1.0
    return X, y


# linear ------------------------------------------------------------------

def test_linear_matches_normal_equations():
    rng = make_rng(2)
    X = np.column_stack([np.ones(200), rng.standard_normal((200, 3))])
    y = X @ np.array([1.0, 2.0, -1.0, 0.5]) + rng.standard_normal(200)
    fit = glm.fit_linear_xy(X, y)
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(fit.coef, oracle, rtol=1e-10, atol=1e-12)
    rss = np.sum((y - X @ oracle) ** 2)
    assert fit.rss == pytest.approx(rss, rel=1e-10)
    assert fit.sigma2 == pytest.approx(rss / (200 - 4), rel=1e-10)
    np.testing.assert_allclose(fit.xtx_inv, np.linalg.inv(X.T @ X), rtol=1e-8)


def test_linear_collinear_is_degraded_not_fatal():
    rng = make_rng(3)
    x = rng.standard_normal(50)
    X = np.column_stack([np.ones(50), x, 2 * x])
    fit = glm.fit_linear_xy(X, 1 + x + rng.standard_normal(50))
    assert "degraded" in fit.flags
    assert np.all(np.isfinite(fit.coef))


def test_too_few_rows():
    with pytest.raises(glm.FitError):
        glm.fit_linear_xy(np.ones((3, 2)), np.zeros(3))


# logistic ----------------------------------------------------------------

def test_logistic_gradient_matches_finite_differences():
    X, y = _logistic_data()
    beta = np.array([0.2, -0.3, 0.4])
    h = 1e-6
    fd = np.array([(glm.logistic_loglik(beta + h * e, X, y) - glm.logistic_loglik(beta - h * e, X, y)) / (2 * h)
                   for e in np.eye(3)])
    an = glm.logistic_score(beta, X, y)
    assert np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1.0)) <= 1e-6


def test_logistic_matches_likelihood_grid():
    # one-slope model: brute-force the likelihood on a fine grid
    rng = make_rng(4)
    x = rng.standard_normal(300)
    y = (rng.random(300) < expit(0.4 + 0.9 * x)).astype(float)
    X = np.column_stack([np.ones(300), x])
    fit = glm.fit_logistic_xy(X, y)
    grid = np.linspace(-1, 2, 601)
    ll = np.array([[glm.logistic_loglik(np.array([a, b]), X, y) for b in grid] for a in grid])
    i, j = np.unravel_index(np.argmax(ll), ll.shape)
    step = grid[1] - grid[0]
    assert abs(fit.coef[0] - grid[i]) <= step
    assert abs(fit.coef[1] - grid[j]) <= step
    assert fit.loglik >= ll.max() - 1e-9


def test_logistic_covariance_is_inverse_information():
    X, y = _logistic_data()
    fit = glm.fit_logistic_xy(X, y)
    p = expit(X @ fit.coef)
    info = X.T @ (X * (p * (1 - p))[:, None])
    np.testing.assert_allclose(fit.coef_cov, np.linalg.inv(info), rtol=1e-6)
    assert fit.converged and not fit.flags


def test_logistic_separation_is_flagged_and_bounded():
    x = np.linspace(-2, 2, 40)
    X = np.column_stack([np.ones(40), x])
    y = (x > 0).astype(float)
    fit = glm.fit_logistic_xy(X, y)
    assert "separation" in fit.flags
    assert np.all(np.abs(fit.coef) <= glm.COEF_BOUND + 1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_logistic_score_vanishes_at_mle(seed):
    X, y = _logistic_data(n=150, seed=seed)
    fit = glm.fit_logistic_xy(X, y)
    if fit.flags:
        return
    assert np.max(np.abs(glm.logistic_score(fit.coef, X, y))) < 1e-6


# multinomial -------------------------------------------------------------

def test_multinomial_gradient_matches_finite_differences():
    X, y = _multinomial_data()
    Y = np.eye(3)[(y - 1).astype(int)]
    B = np.array([[0.1, 0.2, -0.3], [0.0, -0.2, 0.5]])
    h = 1e-6
    an = glm.multinomial_score(B, X, Y).ravel()
    fd = np.empty(B.size)
    for k in range(B.size):
        e = np.zeros(B.size)
        e[k] = h
        fd[k] = (glm.multinomial_loglik(B + e.reshape(B.shape), X, Y)
                 - glm.multinomial_loglik(B - e.reshape(B.shape), X, Y)) / (2 * h)
    assert np.max(np.abs(fd - an) / np.maximum(np.abs(an), 1.0)) <= 1e-6


def test_multinomial_matches_direct_optimizer():
    X, y = _multinomial_data()
    Y = np.eye(3)[(y - 1).astype(int)]
    fit = glm.fit_multinomial_xy(X, y, (1.0, 2.0, 3.0))
    res = optimize.minimize(lambda b: -glm.multinomial_loglik(b.reshape(2, 3), X, Y), np.zeros(6),
                            jac=lambda b: -glm.multinomial_score(b.reshape(2, 3), X, Y).ravel(),
                            method="BFGS", options={"gtol": 1e-9})
    np.testing.assert_allclose(fit.coef.ravel(), res.x, atol=1e-5)
    assert fit.coef.shape == (2, 3)


def test_multinomial_two_levels_equals_logistic():
    X, y = _logistic_data()
    m = glm.fit_multinomial_xy(X, y, (0.0, 1.0))
    lg = glm.fit_logistic_xy(X, y)
    np.testing.assert_allclose(m.coef.ravel(), lg.coef, atol=1e-7)
    np.testing.assert_allclose(m.coef_cov, lg.coef_cov, rtol=1e-5)


# draws -------------------------------------------------------------------

def test_linear_draw_moments():
    rng = make_rng(5)
    X = np.column_stack([np.ones(60), rng.standard_normal(60)])
    y = X @ np.array([1.0, -2.0]) + rng.standard_normal(60)
    fit = glm.fit_linear_xy(X, y)
    draws = np.array([glm.draw_params(fit, make_rng(6, i)).coef for i in range(4000)])
    # marginal posterior of coef is multivariate t with n-p df
    df = fit.n - fit.n_params
    cov = fit.rss / (df - 2) * fit.xtx_inv
    np.testing.assert_allclose(draws.mean(axis=0), fit.coef, atol=4 * np.sqrt(np.diag(cov).max() / 4000))
    np.testing.assert_allclose(np.cov(draws.T), cov, rtol=0.1, atol=1e-4)


def test_eigen_floor_flag_and_warning():
    fit = glm.FitResult("logistic", np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), True, 1, 0.0, 10)
    with pytest.warns(glm.FitWarning):
        d = glm.draw_params(fit, make_rng(0))
    assert "eigen-floor" in d.flags
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert "eigen-floor" in glm.draw_params(fit, make_rng(0), warn=False).flags


def test_impute_cells_multinomial_frequencies():
    draw = glm.ParamDraw("multinomial", np.array([[np.log(2.0)], [0.0]]), levels=(1.0, 2.0, 3.0))
    vals = glm.impute_cells(draw, np.ones((40_000, 1)), make_rng(7))
    freq = np.array([(vals == k).mean() for k in (1.0, 2.0, 3.0)])
    np.testing.assert_allclose(freq, [0.25, 0.5, 0.25], atol=0.01)


def test_named_wrappers_and_labels():
    rng = make_rng(8)
    data = {"y": rng.standard_normal(50), "a": rng.standard_normal(50), "c": rng.integers(1, 4, 50).astype(float)}
    spec = glm.DesignSpec("y", ("a", "c"), {"c": (1.0, 2.0, 3.0)})
    assert spec.labels == ["(intercept)", "a", "c=2", "c=3"]
    fit = glm.fit_linear(data, spec)
    assert fit.coef.shape == (4,)
    with pytest.raises(ValueError):
        glm.DesignSpec("y", ("y",))
