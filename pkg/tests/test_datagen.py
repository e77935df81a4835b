from __future__ import annotations

import json

import numpy as np
import pytest
from scipy.special import expit

from ipsw_mi.datagen import (
    ConfigError,
    GenerationError,
    ScenarioConfig,
    gen_covariates,
    gen_potential_outcomes,
    gen_treatment,
    gen_trial_indicator,
    make_superpopulation,
    selection_prob,
)


def test_default_config_values():
    cfg = ScenarioConfig()
    assert cfg.n_target == 10_000
    assert cfg.alpha == (-4.10, 1, 1, 1)
    assert cfg.beta1 == (1, 1, 1, 1) and cfg.beta0 == (0, 0, 0, 1)
    assert cfg.noise_sd == 1 and cfg.treat_prob == 0.5


def test_config_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigError, match="treat_prob"):
        ScenarioConfig(treat_prob=1.5)
    with pytest.raises(ConfigError, match="alpha"):
        ScenarioConfig(alpha=(1.0, 2.0))
    with pytest.raises(ConfigError, match="colour"):
        ScenarioConfig.from_dict({"colour": 1})
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_target": ')
    with pytest.raises(ConfigError, match="malformed JSON"):
        ScenarioConfig.from_json(bad)


def test_config_json_round_trip(tmp_path):
    cfg = ScenarioConfig(n_target=500, seed=3)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert ScenarioConfig.from_json(p) == cfg


def test_covariates_are_standard_normal():
    X = gen_covariates(100_000, np.random.default_rng(0))
    assert np.all(np.abs(X.mean(axis=0)) < 0.02)
    assert np.all((X.std(axis=0) > 0.98) & (X.std(axis=0) < 1.02))
    corr = np.corrcoef(X.T)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.02)


def test_covariates_deterministic():
    a = gen_covariates(100, np.random.default_rng(4))
    b = gen_covariates(100, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_selection_at_origin():
    p = selection_prob(np.zeros((1, 3)), (-4.10, 1, 1, 1))
    assert abs(p[0] - expit(-4.10)) < 1e-15
    assert abs(p[0] - 0.0163) < 1e-4


def test_trial_size_band_and_null_alpha():
    rng = np.random.default_rng(1)
    for _ in range(20):
        S = gen_trial_indicator(gen_covariates(10_000, rng), (-4.10, 1, 1, 1), rng)
        assert 380 <= S.sum() <= 620
    S = gen_trial_indicator(gen_covariates(10_000, rng), (0, 0, 0, 0), rng)
    assert abs(S.mean() - 0.5) < 0.025


def test_treatment_only_on_trial_rows():
    rng = np.random.default_rng(2)
    S = np.r_[np.ones(500), np.zeros(9500)]
    A = gen_treatment(S, 0.5, rng)
    assert np.isnan(A[S == 0]).all()
    assert 0.39 <= A[S == 1].mean() <= 0.61
    assert np.all(gen_treatment(S, 1.0, rng)[S == 1] == 1)


def test_potential_outcome_intercepts_and_slopes():
    rng = np.random.default_rng(0)
    y1, y0 = gen_potential_outcomes(np.zeros((1, 3)), (1, 1, 1, 1), (0, 0, 0, 1), 0.0, rng)
    assert (y1[0], y0[0]) == (1.0, 0.0)
    y1, y0 = gen_potential_outcomes(np.ones((1, 3)), (1, 1, 1, 1), (0, 0, 0, 1), 0.0, rng)
    assert y1[0] - y0[0] == 3.0


def test_mean_individual_effect_is_one():
    rng = np.random.default_rng(3)
    X = gen_covariates(100_000, rng)
    y1, y0 = gen_potential_outcomes(X, (1, 1, 1, 1), (0, 0, 0, 1), 1.0, rng)
    assert abs(np.mean(y1 - y0) - 1.0) < 0.03


def test_observed_outcome_is_realized_potential_outcome(main_pop):
    d = main_pop.data
    trial = d["S"] == 1
    A = d["A"][trial]
    Y = d["Y"][trial]
    assert np.array_equal(Y[A == 1], main_pop.y1[trial][A == 1])
    assert np.array_equal(Y[A == 0], main_pop.y0[trial][A == 0])
    assert not d.mask["Y"][~trial].any() and not d.mask["A"][~trial].any()


def test_superpopulation_bit_reproducible():
    a = make_superpopulation(ScenarioConfig(n_target=2000, seed=8))
    b = make_superpopulation(ScenarioConfig(n_target=2000, seed=8))
    for n in a.data.names:
        assert np.array_equal(a.data[n], b.data[n]) and np.array_equal(a.data.mask[n], b.data.mask[n])
    assert np.array_equal(a.y1, b.y1) and a.true_pate_s0 == b.true_pate_s0


def test_null_effect_is_exactly_zero():
    pop = make_superpopulation(ScenarioConfig(n_target=3000, beta1=(0, 0, 0, 1), noise_sd=0.0, seed=1))
    assert pop.true_pate_s0 == 0.0
    assert pop.true_pate_all == 0.0
    # the realized trial effect is a difference of arm means, so with a null
    # effect it is only the chance imbalance of X3 between arms
    d = pop.data
    t1 = (d["S"] == 1) & (d["A"] == 1)
    t0 = (d["S"] == 1) & (d["A"] == 0)
    assert pop.realized_tate == d["X3"][t1].mean() - d["X3"][t0].mean()
    flat = make_superpopulation(ScenarioConfig(n_target=3000, beta1=(0, 0, 0, 0), beta0=(0, 0, 0, 0),
                                               noise_sd=0.0, seed=1))
    assert flat.realized_tate == 0.0


def test_all_in_trial_is_an_error():
    with pytest.raises(GenerationError, match="empty S=0 stratum"):
        make_superpopulation(ScenarioConfig(n_target=200, alpha=(50.0, 0, 0, 0), seed=1))


def test_estimand_magnitudes(main_pop):
    assert 0.8 < main_pop.true_pate_s0 < 1.1
    assert 2.0 < main_pop.realized_tate < 3.1
    assert 380 <= main_pop.data["S"].sum() <= 620
