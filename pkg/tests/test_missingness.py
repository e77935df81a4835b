from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipsw_mi.missingness import MarSpec, MissingnessError, induce_mar, top_ranked
from ipsw_mi.tabular import ColumnRole, build_dataset

COV, S = ColumnRole.COVARIATE, ColumnRole.TRIAL_INDICATOR


def _ds(x1, x2, x3, s):
    return build_dataset({"X1": x1, "X2": x2, "X3": x3, "S": s}, {"X1": COV, "X2": COV, "X3": COV, "S": S})


def test_nontrial_count_is_exact(main_pop):
    out = induce_mar(main_pop.data, MarSpec(frac_nontrial=0.3))
    s0 = main_pop.data["S"] == 0
    assert (~out.mask["X1"][s0]).sum() == int(np.floor(0.3 * s0.sum()))
    assert out.mask["X1"][~s0].all()


def test_paper_sized_stratum():
    rng = np.random.default_rng(0)
    n = 9500
    ds = _ds(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n), np.zeros(n))
    assert induce_mar(ds, MarSpec()).n_masked("X1") == 2850


def test_ties_at_cutoff_break_by_row_index():
    score_half = np.array([0.0, 1.0, 1.0, 1.0, 1.0, 0.0])
    ds = _ds(np.arange(6.0), score_half, np.zeros(6), np.zeros(6))
    out = induce_mar(ds, MarSpec(frac_nontrial=0.5))
    # four rows tie at the top; the three with the lowest index are masked
    assert (~out.mask["X1"]).nonzero()[0].tolist() == [1, 2, 3]


def test_masked_rows_dominate_unmasked(small_pop):
    out = induce_mar(small_pop.data, MarSpec(frac_nontrial=0.3, frac_trial=0.3))
    score = small_pop.data["X2"] + small_pop.data["X3"]
    for level in (0, 1):
        rows = small_pop.data["S"] == level
        hidden = rows & ~out.mask["X1"]
        shown = rows & out.mask["X1"]
        assert score[hidden].min() >= score[shown].max()


def test_mask_ignores_target_values(small_pop):
    d = small_pop.data
    perm = np.random.default_rng(0).permutation(d.n_rows)
    shuffled = d.replace(values={"X1": d["X1"][perm]})
    a = induce_mar(d, MarSpec(frac_trial=0.1))
    b = induce_mar(shuffled, MarSpec(frac_trial=0.1))
    assert np.array_equal(a.mask["X1"], b.mask["X1"])


def test_random_trial_rule_count(small_pop):
    out = induce_mar(small_pop.data, MarSpec(frac_trial=0.3, trial_rule="random"), np.random.default_rng(1))
    trial = small_pop.data["S"] == 1
    assert (~out.mask["X1"][trial]).sum() == int(np.floor(0.3 * trial.sum()))
    with pytest.raises(MissingnessError):
        induce_mar(small_pop.data, MarSpec(frac_trial=0.3, trial_rule="random"))


def test_rejects_existing_missingness(small_masked):
    with pytest.raises(MissingnessError, match="already"):
        induce_mar(small_masked, MarSpec())


def test_bad_fraction_names_field():
    with pytest.raises(MissingnessError, match="frac_trial"):
        MarSpec(frac_trial=1.2)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40), st.floats(0, 1))
def test_top_ranked_count_and_order(scores, frac):
    score = np.array(scores, dtype=float)
    rows = np.arange(score.size)
    picked = top_ranked(score, rows, frac)
    assert picked.size == int(np.floor(frac * score.size + 1e-9))
    rest = np.setdiff1d(rows, picked)
    if picked.size and rest.size:
        assert score[picked].min() >= score[rest].max()
        # among ties at the cutoff the lower indices win
        cut = score[picked].min()
        tied_out = rest[score[rest] == cut]
        tied_in = picked[score[picked] == cut]
        if tied_out.size:
            assert tied_in.max() < tied_out.min()
