import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomi import glm, harness
from pomi.harness import StudySpec, aggregate, emit_tables, read_metric_rows
from pomi.samplers import SimConfig, generate_true_world, make_rng

SMOKE = dict(config=SimConfig(n=150), replicates=2, D=2, cycles=2, n_truth=20_000)


@pytest.fixture(scope="module")
def smoke():
    return harness.run_study(StudySpec(**SMOKE))


def test_smoke_study_shapes(smoke):
    assert smoke.n_failed == 0
    methods = {r.method for r in smoke.rows}
    assert methods == set(harness.METHODS)
    # IPW carries only the marginal estimands
    assert {r.estimand for r in smoke.rows if r.method == "IPW"} == {"ate", "mor"}
    assert all(r.n_reps == 2 for r in smoke.rows)


def test_worker_count_does_not_change_results(smoke):
    par = harness.run_study(StudySpec(**SMOKE, workers=2), truth=smoke.truth)
    for a, b in zip(smoke.rows, par.rows):
        assert (a.estimand, a.method) == (b.estimand, b.method)
        assert a.mean == b.mean and a.se == b.se and a.cr == b.cr


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40), st.floats(-1, 1))
def test_mse_is_bias_squared_plus_variance(points, t):
    reps = [{"rep": i, "failed": False, "results": {("POMI", "ate"): (p, 0.1, p - 0.2, p + 0.2)}}
            for i, p in enumerate(points)]
    row = aggregate(reps, {"ate": t}, ["POMI"], ["ate"])[0]
    n = len(points)
    assert row.mse == pytest.approx(row.bias ** 2 + row.esd ** 2 * (n - 1) / n, abs=1e-10)


def test_aggregate_coverage_counts_interval_hits():
    reps = [{"rep": 0, "failed": False, "results": {("IPW", "ate"): (0.0, 0.1, -0.1, 0.1)}},
            {"rep": 1, "failed": False, "results": {("IPW", "ate"): (0.5, 0.1, 0.4, 0.6)}}]
    row = aggregate(reps, {"ate": 0.05}, ["IPW"], ["ate"])[0]
    assert row.cr == 0.5 and row.bias == pytest.approx(0.2)


def test_emit_tables_round_trip(tmp_path, smoke):
    raw, table, js = emit_tables(smoke.rows, tmp_path, "smoke")
    back = read_metric_rows(raw)
    key = lambda r: (r.estimand, r.method)
    assert sorted(back, key=key) == sorted(smoke.rows, key=key)
    text = table.read_text()
    assert text.startswith("estimand,method,true,bias_x100")
    assert js.exists()


def test_proportion_table_omits_ipw(tmp_path, smoke):
    cells = [r for r in smoke.rows if r.estimand in harness.CELLS]
    _, table, _ = emit_tables(cells, tmp_path, "cells")
    assert "IPW" not in table.read_text()


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        StudySpec(replicates=1)
    with pytest.raises(ValueError):
        StudySpec(methods=("bogus",))
    s = StudySpec(config=SimConfig(alpha=2.0), methods=("POMI+IND",), replicates=3)
    assert StudySpec.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        StudySpec.from_dict({"nonsense": 1})


def test_failure_rate_guard(monkeypatch):
    monkeypatch.setattr(harness, "run_replicate", lambda spec, rep: {"rep": rep, "results": {}, "failed": True})
    with pytest.raises(harness.StudyError):
        harness.run_study(StudySpec(**SMOKE), truth={"ate": 0.0})


def test_beta_truth_cross_cells_shrink():
    # a shared U pulls Y0 and Y1 together, so discordant cells lose mass
    vals = []
    for b in (0.0, 0.9, 1.49):
        t = harness.truth_oracle(SimConfig(beta1=b, beta2=b), n_truth=400_000, seed=3)
        vals.append(t.props[1] + t.props[2])
    assert vals[0] > vals[1] > vals[2]


def test_truth_oracle_membership_matches_in_memory_fit():
    cfg = SimConfig()
    t = harness.truth_oracle(cfg, n_truth=60_000, seed=4, chunk=20_000, membership=True)
    ws = [generate_true_world(cfg, make_rng(4, k), 20_000) for k in range(3)]
    X = np.vstack([harness._membership_design(w)[0] for w in ws])
    code = np.concatenate([2 * w.y0.astype(int) + w.y1 for w in ws]).astype(float)
    ref = glm.fit_multinomial_xy(X, code)
    np.testing.assert_allclose(t.membership.coef, ref.coef, atol=1e-6)
