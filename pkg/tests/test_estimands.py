import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomi import estimands as est
from pomi.data import ColumnRole, CompletedDataset, ObservedDataset, Provenance
from pomi.samplers import make_rng


def completed_from(y0, y1, extra=None):
    """A CompletedDataset holding only the columns the estimators read."""
    n = len(y0)
    cols = {"x1": np.zeros(n), "z": np.zeros(n), "y": np.asarray(y0, float)}
    roles = {"x1": ColumnRole.COVARIATE_CONT, "z": ColumnRole.EXPOSURE, "y": ColumnRole.OUTCOME}
    src = ObservedDataset.from_arrays(cols, roles)
    values = {**cols, "y0": np.asarray(y0, float), "y1": np.asarray(y1, float), **(extra or {})}
    return CompletedDataset(values, src, Provenance(0, 1, 0, "test"))


def cells_table(counts):
    """(y0, y1) columns realizing the given (00, 01, 10, 11) counts."""
    y0 = np.repeat([0, 0, 1, 1], counts)
    y1 = np.repeat([0, 1, 0, 1], counts)
    return y0, y1


tables = st.lists(st.integers(1, 60), min_size=4, max_size=4)


@given(tables)
def test_ate_is_p01_minus_p10_exactly(counts):
    c = completed_from(*cells_table(counts))
    e = est.estimate(c)
    assert e.ate == e.props[1] - e.props[2]
    assert e.ate == pytest.approx(e.p1 - e.p0, abs=1e-15)


@given(tables)
def test_proportions_sum_to_one(counts):
    e = est.estimate(completed_from(*cells_table(counts)))
    assert sum(e.props) == pytest.approx(1.0, abs=1e-12)
    assert all(0 < p < 1 for p in e.props)


def test_hand_example():
    c = completed_from(*cells_table([2, 3, 1, 4]))
    e = est.estimate(c)
    assert e.props == pytest.approx((0.2, 0.3, 0.1, 0.4))
    assert e.p0 == pytest.approx(0.5) and e.p1 == pytest.approx(0.7)
    assert e.ate == pytest.approx(0.2)
    assert e.mor == pytest.approx(0.7 * 0.5 / (0.5 * 0.3))


def _log_mor_sandwich(props, n):
    """J Sigma J^T with Sigma the multinomial covariance of the four cell shares
    and J the gradient of log MOR in (p00, p01, p10, p11)."""
    p = np.asarray(props, float)
    sigma = (np.diag(p) - np.outer(p, p)) / n
    p0, p1 = p[2] + p[3], p[1] + p[3]
    d0 = -1 / (p0 * (1 - p0))
    d1 = 1 / (p1 * (1 - p1))
    J = np.array([0.0, d1, d0, d0 + d1])
    return float(J @ sigma @ J)


@given(st.lists(st.floats(0.02, 1.0), min_size=4, max_size=4), st.integers(10, 5000))
def test_log_mor_variance_matches_sandwich(w, n):
    p = np.asarray(w) / np.sum(w)
    p0, p1 = p[2] + p[3], p[1] + p[3]
    closed = est.within_var_log_mor(p0, p1, p[3], n)
    assert closed == pytest.approx(_log_mor_sandwich(p, n), rel=1e-12, abs=1e-15)


def test_ate_variance_matches_sandwich():
    p = np.array([0.2, 0.1, 0.3, 0.4])
    n = 1000
    sigma = (np.diag(p) - np.outer(p, p)) / n
    J = np.array([0.0, 1.0, -1.0, 0.0])
    # the closed form divides by n - 1 rather than n
    assert est.within_var_ate(0.7, 0.5, 0.4, n) == pytest.approx(J @ sigma @ J * n / (n - 1), rel=1e-12)


@pytest.mark.parametrize("props", [(0.212, 0.104, 0.290, 0.394), (0.4, 0.3, 0.2, 0.1)])
def test_within_variances_match_monte_carlo(props):
    n, reps = 1000, 6000
    rng = make_rng(11)
    counts = rng.multinomial(n, props, size=reps)
    ph = counts / n
    p0, p1, p11 = ph[:, 2] + ph[:, 3], ph[:, 1] + ph[:, 3], ph[:, 3]
    ate = p1 - p0
    log_mor = np.log(p1 * (1 - p0) / (p0 * (1 - p1)))
    P0, P1 = props[2] + props[3], props[1] + props[3]
    assert np.var(ate, ddof=1) == pytest.approx(est.within_var_ate(P0, P1, props[3], n), rel=0.1)
    assert np.var(log_mor, ddof=1) == pytest.approx(est.within_var_log_mor(P0, P1, props[3], n), rel=0.1)
    v_props = est.within_var_props(props, n)
    np.testing.assert_allclose(np.var(ph, axis=0, ddof=1), v_props, rtol=0.1)
    mor = np.exp(log_mor)
    m0 = P1 * (1 - P0) / (P0 * (1 - P1))
    assert np.var(mor, ddof=1) == pytest.approx(est.var_mor_from_log(m0, est.within_var_log_mor(P0, P1, props[3], n)),
                                                rel=0.1)


def test_mor_boundary_correction():
    with pytest.warns(est.BoundaryWarning):
        m = est.mor(0.0, 0.5, n=100)
    corr0 = (0 + 1 / 100) / (1 + 2 / 100)
    assert m == pytest.approx(0.5 * (1 - corr0) / (corr0 * 0.5))
    with pytest.raises(ValueError):
        est.mor(1.0, 0.5)


def test_estimate_flags_boundary_without_warning():
    c = completed_from(np.zeros(20), np.r_[np.ones(10), np.zeros(10)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        e = est.estimate(c)
    assert e.corrected
    assert np.isfinite(e.log_mor) and e.within_var["log_mor"] > 0


def test_membership_reference_and_empty_cell():
    rng = make_rng(12)
    n = 4000
    x = rng.standard_normal(n)
    eta = np.column_stack([np.zeros(n), -0.5 + x, 0.2 - x, 0.3 + 0.5 * x])
    P = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
    code = (rng.random(n)[:, None] > np.cumsum(P, axis=1)[:, :-1]).sum(axis=1)
    c = completed_from(code // 2, code % 2, {"x": x})
    fit = est.fit_membership(c, ["x"])
    np.testing.assert_allclose(fit.coef, [[-0.5, 1.0], [0.2, -1.0], [0.3, 0.5]], atol=0.2)
    empty = completed_from(*cells_table([5, 0, 5, 5]), {"x": np.zeros(15)})
    with pytest.raises(est.EmptyCellError, match=r"\[5, 0, 5, 5\]"):
        est.fit_membership(empty, ["x"])


def test_membership_codes_order():
    np.testing.assert_array_equal(est.membership_codes([0, 0, 1, 1], [0, 1, 0, 1]), [0, 1, 2, 3])


def test_small_n_rejected():
    with pytest.raises(ValueError):
        est.within_var_ate(0.5, 0.5, 0.25, 1)


@settings(max_examples=50)
@given(tables)
def test_within_variances_nonnegative(counts):
    e = est.estimate(completed_from(*cells_table(counts)))
    assert all(v >= 0 for v in e.within_var.values())
