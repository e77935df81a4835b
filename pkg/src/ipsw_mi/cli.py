"""Command-line entry point: ``ipsw-mi {simulate,study,apply,diagnose}``.

Exit codes: 0 success, 2 bad config or input, 3 data generation failure,
4 study failure, 5 analysis pipeline failure.

Output files
------------
simulate   CSV with columns X1..Xp,S,A,Y (plus Y1,Y0 with --reveal-potential)
           and a JSON file of true estimands.
study      results.csv  method,trial_missing,bias,bias_mcse,emp_se,
                        emp_se_mcse,avg_robust_se,mse,mse_mcse,
                        n_completed,n_failed
           results.json the same rows plus config and estimand averages
           replicates.csv one line per replicate x method x level
apply      JSON report with the pooled estimate, Rubin variance, bootstrap SE
           and a balance report per analysed dataset.
diagnose   balance.csv  covariate,asd_before,asd_after
           ps_histogram.csv bin_lo,bin_hi,n_trial,n_target
           summary.json Tipton index, ESS and sample sizes
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from ipsw_mi.datagen import ConfigError, GenerationError, ScenarioConfig, make_superpopulation
from ipsw_mi.diagnostics import BalanceReport, DiagnosticsError, asd, balance_report, ps_histograms, tipton_index
from ipsw_mi.glm import GlmError
from ipsw_mi.ipsw import (
    BootstrapError,
    EstimateResult,
    EstimationError,
    WeightScheme,
    bootstrap,
    complete_case,
    complete_rows,
    compute_weights,
    estimate_pate,
    estimate_ps,
    rubin_pool,
    treatment_prob,
)
from ipsw_mi.mice import KINDS, ImputationError, build_spec, impute
from ipsw_mi.study import StudyConfig, StudyError, run_study
from ipsw_mi.tabular import ColumnRole, Dataset, DatasetError, concat_trial_target, read_columns, read_csv, write_csv

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_GENERATION = 3
EXIT_STUDY = 4
EXIT_PIPELINE = 5

APPLY_METHODS = ("CC",) + tuple(KINDS)
OVERLAP_WARN = 0.5
INPUT_ROLES = (ColumnRole.COVARIATE, ColumnRole.TREATMENT, ColumnRole.OUTCOME)


class InputError(ValueError):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _resolve_seed(seed: int | None) -> int:
    if seed is None:
        seed = secrets.randbits(32)
        print(f"seed: {seed}", file=sys.stderr)
    return seed


def _load_json(path: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"<json>: malformed JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError("<root>: expected a JSON object")
    return d


# ---------------------------------------------------------------------------
# simulate / study
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        raw = _load_json(args.config) if args.config else {}
        cfg = ScenarioConfig.from_dict(raw)
    except ConfigError as e:
        _err(str(e))
        return EXIT_INPUT
    seed = args.seed if args.seed is not None else raw.get("seed")
    cfg = replace(cfg, seed=_resolve_seed(seed))
    try:
        sp = make_superpopulation(cfg)
    except GenerationError as e:
        _err(str(e))
        return EXIT_GENERATION
    out = Path(args.out)
    extra = {"Y1": sp.y1, "Y0": sp.y0} if args.reveal_potential else None
    write_csv(sp.data, out, extra=extra)
    summary = {"seed": cfg.seed, "n_rows": sp.data.n_rows, "n_trial": int(sp.data["S"].sum()), **sp.estimands()}
    summary_path = Path(args.summary) if args.summary else out.with_suffix(".json")
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def cmd_study(args: argparse.Namespace) -> int:
    try:
        raw = _load_json(args.config)
        if args.seed is None and "master_seed" not in raw:
            raw["master_seed"] = _resolve_seed(None)
        elif args.seed is not None:
            raw["master_seed"] = args.seed
        cfg = StudyConfig.from_dict(raw)
    except ConfigError as e:
        _err(str(e))
        return EXIT_INPUT

    def progress(done: int, total: int) -> None:
        if not args.quiet:
            print(f"\rreplicate {done}/{total}", end="" if done < total else "\n", file=sys.stderr)

    try:
        res = run_study(cfg, workers=args.workers, progress=progress)
    except StudyError as e:
        _err(f"study failed for method {e.method}: {e}")
        return EXIT_STUDY
    except GenerationError as e:
        _err(str(e))
        return EXIT_GENERATION
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "results.csv")
    res.write_json(out / "results.json")
    res.write_replicates_csv(out / "replicates.csv")
    if not args.quiet:
        print(res.table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# apply / diagnose
# ---------------------------------------------------------------------------

def parse_roles(pairs: Sequence[str], roles_json: str | None) -> dict[str, ColumnRole]:
    """Merge ``name=ROLE`` flags with an optional JSON object of the same."""
    roles: dict[str, ColumnRole] = {}
    if roles_json:
        try:
            d = _load_json(roles_json)
        except ConfigError as e:
            raise InputError(str(e)) from None
        pairs = [f"{k}={v}" for k, v in d.items()] + list(pairs)
    for p in pairs:
        name, sep, role = p.partition("=")
        if not sep or not name or not role:
            raise InputError(f"bad role flag {p!r}; expected name=ROLE")
        try:
            r = ColumnRole.parse(role)
        except ValueError as e:
            raise InputError(str(e)) from None
        if r not in INPUT_ROLES:
            raise InputError(f"role {r.value!r} cannot be assigned here; the trial indicator is built from the file split")
        roles[name] = r
    for need in (ColumnRole.TREATMENT, ColumnRole.OUTCOME):
        if need not in roles.values():
            raise InputError(f"no column given the {need.value} role")
    if ColumnRole.COVARIATE not in roles.values():
        raise InputError("no covariates given")
    return roles


def load_pair(trial_csv: str, target_csv: str, roles: dict[str, ColumnRole], indicator: str, strict: bool) -> Dataset:
    """Concatenate a trial file and a target file under a shared role map.

    The target file may omit treatment and outcome; covariates absent from
    one file are allowed only when ``strict`` is off.
    """
    def present(path: str, need: Sequence[ColumnRole]) -> dict[str, ColumnRole]:
        try:
            header = read_columns(path).keys()
        except OSError as e:
            raise InputError(f"{path}: {e.strerror}") from None
        sub = {k: v for k, v in roles.items() if k in header}
        for k, v in roles.items():
            if v in need and k not in header:
                raise InputError(f"{path}: column {k!r} ({v.value}) not found")
        return sub

    trial_roles = present(trial_csv, (ColumnRole.TREATMENT, ColumnRole.OUTCOME))
    target_roles = present(target_csv, ())
    target_roles = {k: v for k, v in target_roles.items() if v is ColumnRole.COVARIATE}
    for k, v in roles.items():
        if v is ColumnRole.COVARIATE and k not in trial_roles and k not in target_roles:
            raise InputError(f"covariate {k!r} found in neither file")
    trial = read_csv(trial_csv, trial_roles)
    target = read_csv(target_csv, target_roles)
    return concat_trial_target(trial, target, indicator=indicator, strict=strict)


def analyse(
    ds: Dataset,
    method: str,
    scheme: str,
    m: int | None,
    interactions: Sequence[str] | None,
    seed: int,
    e_mode: str = "marginal",
) -> tuple[EstimateResult | None, object, list[tuple[Dataset, np.ndarray, np.ndarray]]]:
    """Run one method; return the single or pooled estimate plus the analysed
    datasets with their sampling scores and weights."""
    generalize = WeightScheme(scheme) is WeightScheme.GENERALIZE

    def fit(d: Dataset) -> tuple[np.ndarray, np.ndarray]:
        ps = estimate_ps(d)
        e_a = treatment_prob(d, e_mode) if generalize else None
        return ps, compute_weights(d, ps, e_a, scheme)

    if method == "CC":
        sub = ds.subset(complete_rows(ds))
        res = complete_case(ds, scheme, e_mode)
        ps, w = fit(sub)
        return res, res, [(sub, ps, w)]
    spec = build_spec(method, ds, m_rule=m if m is not None else "paper_percent", seed=seed, interactions=interactions)
    imputed = impute(ds, spec)
    parts, results = [], []
    for d in imputed.datasets:
        ps, w = fit(d)
        results.append(estimate_pate(d, w))
        parts.append((d, ps, w))
    pooled = rubin_pool([r.estimate for r in results], [r.robust_se**2 for r in results])
    return None, pooled, parts


def _bootstrap_pipeline(
    ds: Dataset, seed: int, method: str, scheme: str, m: int | None, interactions: Sequence[str] | None, e_mode: str
) -> float:
    single, pooled, _ = analyse(ds, method, scheme, m, interactions, seed, e_mode)
    return single.estimate if single is not None else pooled.estimate


def cmd_apply(args: argparse.Namespace) -> int:
    try:
        roles = parse_roles(args.role, args.roles_json)
        ds = load_pair(args.trial, args.target, roles, args.indicator, not args.permissive)
        if args.m is not None and args.m < 2:
            raise InputError("--m must be at least 2")
        if args.B < 0 or args.B == 1:
            raise InputError("--B must be 0 (skip) or at least 2")
    except (InputError, DatasetError, ConfigError) as e:
        _err(str(e))
        return EXIT_INPUT
    seed = _resolve_seed(args.seed)
    ss = np.random.SeedSequence(seed)
    impute_seed, boot_seq = ss.spawn(2)
    impute_seed = int(impute_seed.generate_state(1)[0])
    interactions = args.interact or None
    try:
        single, pooled, parts = analyse(ds, args.method, args.scheme, args.m, interactions, impute_seed, args.e_mode)
        reports = [balance_report(d, ps, w) for d, ps, w in parts]
        boot = None
        if args.B > 0:
            pipeline = partial(
                _bootstrap_pipeline,
                method=args.method,
                scheme=args.scheme,
                m=args.m,
                interactions=interactions,
                e_mode=args.e_mode,
            )
            boot = bootstrap(ds, pipeline, args.B, np.random.default_rng(boot_seq), workers=args.workers)
    except (EstimationError, ImputationError, BootstrapError, DiagnosticsError, GlmError, DatasetError) as e:
        _err(str(e))
        return EXIT_PIPELINE

    s = ds.require(ColumnRole.TRIAL_INDICATOR)
    report: dict = {
        "seed": seed,
        "method": args.method,
        "scheme": WeightScheme(args.scheme).value,
        "n_trial": int(ds[s].sum()),
        "n_target": int(ds.n_rows - ds[s].sum()),
    }
    if single is not None:
        report.update(m=1, estimate=single.estimate, rubin_se=None, robust_se=single.robust_se, n_used=single.n_used)
    else:
        report.update(
            m=pooled.m,
            estimate=pooled.estimate,
            rubin_se=pooled.se,
            within_var=pooled.within_var,
            between_var=pooled.between_var,
            estimates=list(pooled.estimates),
        )
    if boot is None:
        report["bootstrap"] = {"B": 0, "se": None, "note": "bootstrap skipped (B=0); Rubin variance only"}
    else:
        report["bootstrap"] = {"B": boot.B, "se": boot.se, "n_failed": boot.n_failed}
    report["balance"] = [r.to_dict() for r in reports]
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    try:
        roles = parse_roles(args.role, args.roles_json)
        ds = load_pair(args.trial, args.target, roles, args.indicator, not args.permissive)
    except (InputError, DatasetError, ConfigError) as e:
        _err(str(e))
        return EXIT_INPUT
    sub = ds.subset(complete_rows(ds))
    s = sub.require(ColumnRole.TRIAL_INDICATOR)
    trial = sub[s] == 1
    separated = False
    try:
        ps = estimate_ps(sub)
        e_a = treatment_prob(sub) if WeightScheme(args.scheme) is WeightScheme.GENERALIZE else None
        w = compute_weights(sub, ps, e_a, args.scheme)
        rep = balance_report(sub, ps, w, bins=args.bins)
    except GlmError as e:
        # perfect separation means the two samples do not overlap at all
        separated = True
        print(f"note: sampling-score fit failed ({e}); treating samples as non-overlapping", file=sys.stderr)
        ps = sub[s].copy()
        try:
            before = {c: float(asd(sub, c)) for c in sub.covariates}
        except DiagnosticsError as e2:
            _err(str(e2))
            return EXIT_PIPELINE
        rep = BalanceReport(
            asd_before=before,
            asd_after={c: float("nan") for c in before},
            tipton_index=tipton_index(ps[trial], ps[~trial], args.bins),
            ess_trial=float("nan"),
            n_trial=int(trial.sum()),
        )
    except (EstimationError, DiagnosticsError) as e:
        _err(str(e))
        return EXIT_PIPELINE

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "balance.csv", "w") as fh:
        fh.write("covariate,asd_before,asd_after\n")
        for c, b in rep.asd_before.items():
            fh.write(f"{c},{b!r},{rep.asd_after[c]!r}\n")
    with open(out / "ps_histogram.csv", "w") as fh:
        fh.write("bin_lo,bin_hi,n_trial,n_target\n")
        for h in ps_histograms(ps[trial], ps[~trial], args.bins):
            fh.write(f"{h['bin_lo']!r},{h['bin_hi']!r},{h['n_trial']},{h['n_target']}\n")
    summary = {
        "tipton_index": rep.tipton_index,
        "ess_trial": None if separated else rep.ess_trial,
        "n_trial": rep.n_trial,
        "n_target": int((~trial).sum()),
        "n_dropped_incomplete": ds.n_rows - sub.n_rows,
        "separated": separated,
        "bins": args.bins,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(rep.table())
    if rep.tipton_index < OVERLAP_WARN:
        print(f"warning: poor overlap between trial and target (Tipton index {rep.tipton_index:.3f} < {OVERLAP_WARN})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ipsw-mi",
        description="IPSW estimation of population treatment effects with multiple imputation.",
        epilog=__doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser(
        "simulate",
        help="generate one superpopulation",
        description="Write a simulated trial+target table (columns X1..Xp,S,A,Y; "
        "Y1,Y0 appended with --reveal-potential) and a JSON file of true estimands.",
    )
    sim.add_argument("--config", help="scenario JSON; defaults when omitted")
    sim.add_argument("--out", required=True, help="output CSV path")
    sim.add_argument("--summary", help="estimands JSON path (default: OUT with .json suffix)")
    sim.add_argument("--reveal-potential", action="store_true", help="append the potential outcomes Y1,Y0")
    sim.add_argument("--seed", type=int)
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser(
        "study",
        help="run the Monte Carlo comparison of missing-data methods",
        description="Writes results.csv (method,trial_missing,n_completed,n_failed,bias,bias_mcse,"
        "emp_se,emp_se_mcse,mse,mse_mcse,avg_robust_se,m_mean,truth), results.json and replicates.csv.",
    )
    st.add_argument("--config", required=True, help="study JSON")
    st.add_argument("--out-dir", required=True)
    st.add_argument("--workers", type=_positive_int, default=1)
    st.add_argument("--seed", type=int, help="overrides master_seed in the config")
    st.add_argument("--quiet", action="store_true")
    st.set_defaults(func=cmd_study)

    def pair_args(q: argparse.ArgumentParser) -> None:
        q.add_argument("--trial", required=True, help="trial CSV (needs treatment and outcome)")
        q.add_argument("--target", required=True, help="target-population CSV")
        q.add_argument("--role", action="append", default=[], metavar="NAME=ROLE",
                       help="column role: covariate, treatment or outcome (repeatable)")
        q.add_argument("--roles-json", help="JSON object mapping column names to roles")
        q.add_argument("--indicator", default="S", help="name of the constructed trial indicator")
        q.add_argument("--permissive", action="store_true",
                       help="allow covariates present in only one file (filled as missing)")
        q.add_argument("--scheme", choices=[s.value for s in WeightScheme], default="transport")

    ap = sub.add_parser(
        "apply",
        help="estimate the population effect for a trial/target pair",
        description="Concatenate, impute, weight, pool with Rubin's rules and bootstrap; writes a JSON report.",
    )
    pair_args(ap)
    ap.add_argument("--method", choices=APPLY_METHODS, default="M2")
    ap.add_argument("--m", type=int, help="number of imputations (default: percent-incomplete rule)")
    ap.add_argument("--interact", action="append", metavar="COVARIATE",
                    help="covariate multiplied by treatment under M3A/M3B (repeatable; default all)")
    ap.add_argument("--e-mode", choices=("marginal", "logistic"), default="marginal")
    ap.add_argument("--B", type=int, default=2000, help="bootstrap resamples; 0 skips")
    ap.add_argument("--workers", type=_positive_int, default=1)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="report path (default: stdout)")
    ap.set_defaults(func=cmd_apply)

    dg = sub.add_parser(
        "diagnose",
        help="balance and overlap diagnostics for a trial/target pair",
        description="Writes balance.csv (covariate,asd_before,asd_after), "
        "ps_histogram.csv (bin_lo,bin_hi,n_trial,n_target) and summary.json.",
    )
    pair_args(dg)
    dg.add_argument("--bins", type=int, default=20)
    dg.add_argument("--out-dir", required=True)
    dg.set_defaults(func=cmd_diagnose)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
