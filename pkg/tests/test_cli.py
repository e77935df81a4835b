from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from ipsw_mi.cli import main
from ipsw_mi.datagen import ScenarioConfig, make_superpopulation

ROLES = [a for c in ("X1=covariate", "X2=covariate", "X3=covariate", "A=treatment", "Y=outcome")
         for a in ("--role", c)]


def _write_csv(path: Path, cols: dict[str, np.ndarray], rows: np.ndarray) -> Path:
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in rows:
            fh.write(",".join("NA" if np.isnan(v[i]) else repr(float(v[i])) for v in cols.values()) + "\n")
    return path


def _pair(tmp: Path, scenario: ScenarioConfig, frac_missing=0.02, target_outcomes=False):
    pop = make_superpopulation(scenario)
    d = pop.data
    rng = np.random.default_rng(scenario.seed + 1)
    x1 = d.as_nan("X1")
    x1[rng.random(d.n_rows) < frac_missing] = np.nan
    cols = {"X1": x1, "X2": d["X2"], "X3": d["X3"], "A": d.as_nan("A"), "Y": d.as_nan("Y")}
    trial = d["S"] == 1
    target_cols = cols if target_outcomes else {k: cols[k] for k in ("X1", "X2", "X3")}
    return (
        _write_csv(tmp / "trial.csv", cols, np.flatnonzero(trial)),
        _write_csv(tmp / "target.csv", target_cols, np.flatnonzero(~trial)),
        pop,
    )


NULL = ScenarioConfig(n_target=3000, alpha=(-2.5, 1.0, 1.0, 1.0), beta1=(0, 1, 1, 1), beta0=(0, 1, 1, 1), seed=21)


@pytest.fixture(scope="module")
def null_pair(tmp_path_factory):
    return _pair(tmp_path_factory.mktemp("null"), NULL)


def _apply(trial, target, out, *extra):
    return main(["apply", "--trial", str(trial), "--target", str(target), *ROLES, "--out", str(out), *extra])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_default_scenario(tmp_path):
    out = tmp_path / "pop.csv"
    assert main(["simulate", "--out", str(out), "--seed", "3"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10_000 and list(rows[0]) == ["X1", "X2", "X3", "S", "A", "Y"]
    n_trial = sum(r["S"] == "1" for r in rows)
    assert 380 <= n_trial <= 620
    summary = json.loads(out.with_suffix(".json").read_text())
    assert summary["seed"] == 3 and summary["n_trial"] == n_trial


def test_simulate_repeatable_bytes(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "--out", str(a), "--seed", "5", "--reveal-potential"]) == 0
    assert main(["simulate", "--out", str(b), "--seed", "5", "--reveal-potential"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0].endswith("Y1,Y0")


def test_simulate_without_seed_reports_it(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "p.csv")]) == 0
    seed = int(capsys.readouterr().err.split("seed:")[1].split()[0])
    assert json.loads((tmp_path / "p.json").read_text())["seed"] == seed


def test_simulate_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_target": 100, "gamma": 1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2
    assert "gamma" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2


def test_simulate_generation_failure(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_target": 200, "alpha": [-40, 0, 0, 0]}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x.csv"), "--seed", "1"]) == 3


# ---------------------------------------------------------------------------
# study
# ---------------------------------------------------------------------------

QUICK_STUDY = {
    "scenario": {"n_target": 1500, "alpha": [-2.0, 1, 1, 1]},
    "n_sim": 2, "m_rule": 2, "maxit": 2, "methods": ["FullData", "CC", "M2"],
}


def _study(tmp, cfg, *extra):
    path = tmp / "study.json"
    path.write_text(json.dumps(cfg))
    return main(["study", "--config", str(path), "--out-dir", str(tmp / "out"), "--quiet", *extra])


def test_study_outputs_independent_of_workers(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert _study(a, QUICK_STUDY, "--seed", "4", "--workers", "1") == 0
    assert _study(b, QUICK_STUDY, "--seed", "4", "--workers", "2") == 0
    for name in ("results.csv", "results.json", "replicates.csv"):
        assert (a / "out" / name).read_bytes() == (b / "out" / name).read_bytes()
    header = (a / "out" / "results.csv").read_text().splitlines()[0]
    assert header == ("method,trial_missing,bias,bias_mcse,emp_se,emp_se_mcse,avg_robust_se,"
                      "mse,mse_mcse,n_completed,n_failed")


def test_study_m1a_without_complete_level(tmp_path, capsys):
    cfg = {**QUICK_STUDY, "methods": ["M1A"], "trial_fracs": [0.1]}
    assert _study(tmp_path, cfg, "--seed", "1") == 2
    assert "M1A" in capsys.readouterr().err


def test_study_failure_names_method(tmp_path, capsys):
    # every trial row loses X1, so complete-case analysis has nothing to fit
    cfg = {**QUICK_STUDY, "methods": ["CC"], "trial_fracs": [1.0]}
    assert _study(tmp_path, cfg, "--seed", "1") == 4
    assert "method CC" in capsys.readouterr().err


def test_study_generation_failure(tmp_path):
    cfg = {**QUICK_STUDY, "scenario": {"n_target": 200, "alpha": [-40, 0, 0, 0]}}
    assert _study(tmp_path, cfg, "--seed", "1") == 3


# ---------------------------------------------------------------------------
# apply
# ---------------------------------------------------------------------------

def test_apply_null_effect_within_three_se(null_pair, tmp_path):
    trial, target, pop = null_pair
    out = tmp_path / "r.json"
    assert _apply(trial, target, out, "--m", "3", "--B", "60", "--seed", "2") == 0
    rep = json.loads(out.read_text())
    assert abs(pop.true_pate_s0) < 0.1
    assert rep["m"] == 3 and len(rep["estimates"]) == 3
    assert abs(rep["estimate"]) <= 3 * rep["bootstrap"]["se"]
    assert len(rep["balance"]) == 3


def test_apply_zero_resamples_uses_rubin_only(null_pair, tmp_path):
    trial, target, _ = null_pair
    out = tmp_path / "r.json"
    assert _apply(trial, target, out, "--method", "CC", "--B", "0", "--seed", "2") == 0
    rep = json.loads(out.read_text())
    assert rep["bootstrap"]["se"] is None and "B=0" in rep["bootstrap"]["note"]


def test_apply_accepts_blank_outcomes_in_target(tmp_path):
    trial, target, _ = _pair(tmp_path, NULL, target_outcomes=True)
    assert _apply(trial, target, tmp_path / "r.json", "--method", "CC", "--B", "0", "--seed", "1") == 0


def test_apply_bytes_independent_of_workers(null_pair, tmp_path):
    trial, target, _ = null_pair
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    common = ("--method", "M1B", "--m", "2", "--B", "12", "--seed", "9")
    assert _apply(trial, target, a, *common, "--workers", "1") == 0
    assert _apply(trial, target, b, *common, "--workers", "2") == 0
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("roles", [
    ["--role", "X1=trial"],
    ["--role", "X1=covariate", "--role", "A=treatment"],
    ["--role", "X1=wibble"],
])
def test_apply_role_errors(null_pair, tmp_path, roles):
    trial, target, _ = null_pair
    rc = main(["apply", "--trial", str(trial), "--target", str(target), *roles, "--B", "0",
               "--out", str(tmp_path / "r.json")])
    assert rc == 2


def test_apply_missing_file(null_pair, tmp_path):
    trial, _, _ = null_pair
    assert _apply(trial, tmp_path / "absent.csv", tmp_path / "r.json", "--B", "0") == 2


def test_apply_pipeline_failure(tmp_path):
    # M1A needs a fully observed trial; this one has missing X1
    trial, target, _ = _pair(tmp_path, NULL, frac_missing=0.1)
    assert _apply(trial, target, tmp_path / "r.json", "--method", "M1A", "--B", "0", "--seed", "1") == 5


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------

def _diagnose(trial, target, out_dir):
    return main(["diagnose", "--trial", str(trial), "--target", str(target), *ROLES, "--out-dir", str(out_dir)])


def test_diagnose_identical_samples(null_pair, tmp_path):
    trial, _, _ = null_pair
    assert _diagnose(trial, trial, tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["tipton_index"] >= 0.99
    with open(tmp_path / "balance.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["covariate"] for r in rows] == ["X1", "X2", "X3"]
    assert all(abs(float(r["asd_before"])) < 1e-12 for r in rows)


def test_diagnose_disjoint_samples_warn(tmp_path, capsys):
    rng = np.random.default_rng(0)
    n = 300
    def side(lo, with_outcome):
        cols = {f"X{j}": rng.uniform(lo, lo + 1, n) for j in (1, 2, 3)}
        if with_outcome:
            cols["A"] = (rng.random(n) < 0.5).astype(float)
            cols["Y"] = rng.normal(size=n)
        return cols
    trial = _write_csv(tmp_path / "t.csv", side(0.0, True), np.arange(n))
    target = _write_csv(tmp_path / "g.csv", side(5.0, False), np.arange(n))
    assert _diagnose(trial, target, tmp_path / "d") == 0
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert summary["tipton_index"] < 0.05
    assert "poor overlap" in capsys.readouterr().out
    hist = (tmp_path / "d" / "ps_histogram.csv").read_text().splitlines()
    assert hist[0] == "bin_lo,bin_hi,n_trial,n_target" and len(hist) == 21
