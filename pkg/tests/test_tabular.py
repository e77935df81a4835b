from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipsw_mi.tabular import (
    ColumnRole,
    DatasetError,
    add_derived_product,
    build_dataset,
    concat_trial_target,
    read_csv,
    write_csv,
)

COV, S, A, Y = ColumnRole.COVARIATE, ColumnRole.TRIAL_INDICATOR, ColumnRole.TREATMENT, ColumnRole.OUTCOME


def test_build_two_columns():
    ds = build_dataset({"X1": np.arange(5.0), "S": [1, 0, 1, 0, 0]}, {"X1": COV, "S": S})
    assert ds.n_rows == 5
    assert ds.covariates == ["X1"]
    assert ds.require(S) == "S"


def test_non_binary_indicator_rejected():
    with pytest.raises(DatasetError, match="non-binary indicator"):
        build_dataset({"X1": np.arange(5.0), "S": [1, 0, 2, 0, 0]}, {"X1": COV, "S": S})


def test_length_mismatch_rejected():
    with pytest.raises(DatasetError, match="length mismatch"):
        build_dataset({"X1": np.arange(5.0), "S": [1, 0, 1, 0, 0, 1]}, {"X1": COV, "S": S})


def test_duplicate_singleton_role_rejected():
    with pytest.raises(DatasetError, match="duplicate"):
        build_dataset({"A1": [0, 1], "A2": [1, 0]}, {"A1": A, "A2": A})


def test_role_aliases():
    assert ColumnRole.parse("S") is S
    assert ColumnRole.parse("Treatment") is A
    with pytest.raises(ValueError):
        ColumnRole.parse("nonsense")


def test_nan_becomes_mask_and_arrays_are_frozen():
    ds = build_dataset({"X1": [1.0, np.nan, 3.0]}, {"X1": COV})
    assert ds.mask["X1"].tolist() == [True, False, True]
    assert ds["X1"][1] == 0.0
    with pytest.raises(ValueError):
        ds["X1"][0] = 5.0


def _trial_target(n1=3, n0=7, target_covs=("age",)):
    trial = build_dataset(
        {"age": np.arange(n1, dtype=float), "A": [1, 0, 1][:n1], "Y": np.ones(n1)},
        {"age": COV, "A": A, "Y": Y},
    )
    target = build_dataset({c: np.arange(n0, dtype=float) for c in target_covs}, {c: COV for c in target_covs})
    return trial, target


def test_concat_counts_rows():
    ds = concat_trial_target(*_trial_target())
    assert ds.n_rows == 10
    assert ds["S"].sum() == 3


def test_concat_masks_treatment_and_outcome_on_target():
    ds = concat_trial_target(*_trial_target())
    target = ds["S"] == 0
    assert not ds.mask["A"][target].any()
    assert not ds.mask["Y"][target].any()
    assert ds.mask["A"][~target].all()


def test_concat_strict_rejects_asymmetric_covariates():
    trial, target = _trial_target(target_covs=("age", "sex"))
    with pytest.raises(DatasetError, match="covariate name mismatch"):
        concat_trial_target(trial, target)


def test_concat_permissive_fills_missing_covariate():
    trial, target = _trial_target(target_covs=("age", "sex"))
    ds = concat_trial_target(trial, target, strict=False)
    trial_rows = ds["S"] == 1
    assert not ds.mask["sex"][trial_rows].any()
    assert ds.mask["sex"][~trial_rows].all()


def test_derived_product_values():
    ds = build_dataset({"X1": [1.0, 2.0], "A": [1.0, 0.0]}, {"X1": COV, "A": A})
    out = add_derived_product(ds, "X1", "A", "X1A")
    assert out["X1A"].tolist() == [1.0, 0.0]
    assert out.roles["X1A"] is ColumnRole.DERIVED


def test_derived_product_inherits_mask():
    ds = build_dataset({"X1": [np.nan, 2.0], "A": [1.0, 1.0]}, {"X1": COV, "A": A})
    out = add_derived_product(ds, "X1", "A", "X1A")
    assert out.mask["X1A"].tolist() == [False, True]


def test_derived_product_existing_name():
    ds = build_dataset({"X1": [1.0, 2.0], "A": [1.0, 0.0]}, {"X1": COV, "A": A})
    with pytest.raises(DatasetError):
        add_derived_product(ds, "X1", "A", "X1")


def test_check_derived_detects_corruption():
    ds = build_dataset({"X1": [1.0, 2.0, 3.0], "A": [1.0, 0.0, 1.0]}, {"X1": COV, "A": A})
    ds = add_derived_product(ds, "X1", "A", "X1A")
    assert ds.check_derived()
    bad = ds.replace(values={"X1A": [1.0, 0.0, 4.0]})
    assert not bad.check_derived()


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(
    st.lists(st.one_of(finite, st.just(float("nan"))), min_size=1, max_size=30),
    st.lists(st.sampled_from([0.0, 1.0]), min_size=30, max_size=30),
)
def test_csv_round_trip(tmp_path_factory, x, s):
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    n = len(x)
    ds = build_dataset({"X": x, "S": s[:n]}, {"X": COV, "S": S})
    write_csv(ds, path)
    back = read_csv(path, {"X": COV, "S": S})
    for name in ("X", "S"):
        assert np.array_equal(back.mask[name], ds.mask[name])
        assert np.array_equal(back[name], ds[name])
