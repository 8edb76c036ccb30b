import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pomi import data
from pomi.data import ColumnRole, ObservedDataset, SchemaError
from pomi.samplers import SIM_ROLES, SimConfig, make_rng, simulate_observed


def small(**over):
    cols = {"x1": np.array([0.1, -0.4, 1.2, 0.0]), "x2": np.array([1.0, np.nan, 0.5, 2.0]),
            "z": np.array([1.0, 0.0, 1.0, 0.0]), "r": np.array([2.0, np.nan, 3.0, np.nan]),
            "y": np.array([1.0, 0.0, np.nan, 1.0])}
    cols.update(over)
    return ObservedDataset.from_arrays(cols, SIM_ROLES)


def test_roles_and_properties():
    d = small()
    assert d.exposure == "z" and d.outcome == "y" and d.post_exposure == "r"
    assert d.covariates == ["x1", "x2"]
    assert d.n_rows == 4
    assert d.mask.sum() == 4


def test_values_are_read_only():
    d = small()
    with pytest.raises(ValueError):
        d.values["x1"][0] = 5.0


@pytest.mark.parametrize("over, msg", [
    ({"z": np.array([1.0, np.nan, 1.0, 0.0])}, "missing"),
    ({"z": np.array([1.0, 2.0, 1.0, 0.0])}, "non-binary"),
    ({"r": np.array([4.0, np.nan, 3.0, np.nan])}, "outside"),
    ({"r": np.array([2.0, 1.0, 3.0, np.nan])}, "non-tester"),
])
def test_validation_errors(over, msg):
    with pytest.raises(SchemaError, match=msg):
        small(**over)


def test_needs_one_exposure_and_outcome():
    with pytest.raises(SchemaError):
        ObservedDataset.from_arrays({"x1": np.zeros(3), "y": np.zeros(3)},
                                    {"x1": ColumnRole.COVARIATE_CONT, "y": ColumnRole.OUTCOME})


def test_categorical_codes_must_be_integers():
    roles = {**SIM_ROLES, "g": ColumnRole.COVARIATE_CAT}
    cols = {k: v for k, v in zip(small().names, small().values.values())}
    with pytest.raises(SchemaError, match="non-integer"):
        ObservedDataset.from_arrays({**cols, "g": np.array([1.0, 2.5, 1.0, 2.0])}, roles)


def test_split_and_merge_potential_outcomes():
    d = data.split_potential_outcomes(small())
    np.testing.assert_array_equal(d.values["y1"], [1.0, np.nan, np.nan, np.nan])
    np.testing.assert_array_equal(d.values["y0"], [np.nan, 0.0, np.nan, 1.0])
    assert d.has_potential_outcomes
    merged = data.merge_outcome(d.values["z"], np.nan_to_num(d.values["y0"]), np.nan_to_num(d.values["y1"]))
    np.testing.assert_array_equal(merged, [1.0, 0.0, 0.0, 1.0])
    with pytest.raises(SchemaError):
        data.split_potential_outcomes(d)


def test_missingness_summary():
    s = data.summarize_missingness(small())
    assert s.fractions["x2"] == 0.25 and s.fractions["x1"] == 0.0
    assert sum(s.patterns.values()) == 4
    assert s.patterns[("r",)] == 1


def _write_schema(tmp_path, roles=SIM_ROLES, na="NA"):
    p = tmp_path / "schema.json"
    p.write_text(json.dumps({"columns": {k: v.value for k, v in roles.items()}, "na_token": na}))
    return p


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 60))
def test_csv_round_trip(tmp_path_factory, seed, n):
    tmp = tmp_path_factory.mktemp("rt")
    d = simulate_observed(SimConfig(n=n), make_rng(seed))
    path = tmp / "d.csv"
    data.write_csv(d, path)
    roles, na = data.load_schema(_write_schema(tmp))
    back = data.load_csv(path, roles, na)
    assert back.names == d.names
    for k in d.names:
        np.testing.assert_array_equal(back.missing[k], d.missing[k])
        np.testing.assert_array_equal(back.values[k], d.values[k])


def test_csv_empty_cell_is_missing_and_custom_token(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,z,r,y\n0.5,,1,2,1\n0.1,.,0,.,0\n0.2,1.5,0,.,.\n0.3,1.5,1,1,0\n")
    d = data.load_csv(path, SIM_ROLES, na_token=".")
    assert d.missing["x2"].tolist() == [True, True, False, False]
    assert d.missing["y"].tolist() == [False, False, True, False]


def test_csv_rejects_unknown_and_potential_outcome_columns(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,z,r,y,extra\n0,1,1,2,1,5\n")
    with pytest.raises(SchemaError, match="unknown"):
        data.load_csv(path, SIM_ROLES)
    with pytest.raises(SchemaError, match="potential-outcome"):
        data.load_csv(path, {**SIM_ROLES, "y0": ColumnRole.POTENTIAL_OUTCOME0})


def test_csv_reports_bad_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x1,x2,z,r,y\n0,1,1,2,1\n0,abc,0,NA,1\n")
    with pytest.raises(SchemaError, match="line 3"):
        data.load_csv(path, SIM_ROLES)


def test_bad_schema_role(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"columns": {"a": "nonsense"}}))
    with pytest.raises(SchemaError):
        data.load_schema(p)


def test_format_cell():
    assert data.format_cell(np.nan, ColumnRole.OUTCOME) == "NA"
    assert data.format_cell(1.0, ColumnRole.OUTCOME) == "1"
    assert data.format_cell(2.0, ColumnRole.COVARIATE_CONT) == "2"
    assert data.format_cell(0.1, ColumnRole.COVARIATE_CONT) == "0.1"
