"""Replicated Monte Carlo study of missing-data methods for IPSW.

Each replicate draws a superpopulation from its own stream
``SeedSequence([master_seed, r])``, masks X1 at every trial-missing level and
estimates the treatment effect with every requested method.  Results are
folded in replicate order, so the output does not depend on the number of
worker processes.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ipsw_mi.datagen import ConfigError, ScenarioConfig, make_superpopulation
from ipsw_mi.ipsw import complete_case, ipsw_estimate, psi_within
from ipsw_mi.mice import build_spec, impute
from ipsw_mi.missingness import MarSpec, induce_mar

METHODS = ("FullData", "CC", "M1A", "M1B", "M2", "M3A", "M3B")
MI_METHODS = ("M1A", "M1B", "M2", "M3A", "M3B")
MAX_FAIL_FRAC = 0.05


class StudyError(RuntimeError):
    def __init__(self, message: str, method: str | None = None):
        super().__init__(message)
        self.method = method


@dataclass(frozen=True)
class StudyConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    trial_fracs: tuple[float, ...] = (0.0, 0.10, 0.30)
    frac_nontrial: float = 0.30
    trial_mar: str = "ranked"
    methods: tuple[str, ...] = METHODS
    n_sim: int = 1000
    truth: str = "pate_s0"
    master_seed: int = 2021
    m_rule: str | int = "paper_percent"
    interactions: tuple[str, ...] = ("X1", "X2")
    maxit: int = 5
    scheme: str = "generalize"
    e_mode: str = "marginal"

    def __post_init__(self) -> None:
        object.__setattr__(self, "trial_fracs", tuple(float(x) for x in self.trial_fracs))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"methods: unknown method {bad[0]!r}; expected a subset of {list(METHODS)}")
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        if not isinstance(self.n_sim, int) or self.n_sim < 2:
            raise ConfigError(f"n_sim: must be an integer >= 2, got {self.n_sim!r}")
        if self.truth not in ("pate_s0", "pate_all"):
            raise ConfigError(f"truth: expected 'pate_s0' or 'pate_all', got {self.truth!r}")
        for f in self.trial_fracs:
            if not 0.0 <= f <= 1.0:
                raise ConfigError(f"trial_fracs: fraction {f!r} outside [0, 1]")
        if not 0.0 <= self.frac_nontrial <= 1.0:
            raise ConfigError(f"frac_nontrial: {self.frac_nontrial!r} outside [0, 1]")
        if self.trial_mar not in ("ranked", "random"):
            raise ConfigError(f"trial_mar: expected 'ranked' or 'random', got {self.trial_mar!r}")
        if "M1A" in self.methods and 0.0 not in self.trial_fracs:
            raise ConfigError("methods: M1A requires a fully observed trial (trial_fracs must include 0)")
        if self.scheme not in ("generalize", "transport"):
            raise ConfigError(f"scheme: expected 'generalize' or 'transport', got {self.scheme!r}")
        if self.e_mode not in ("marginal", "logistic"):
            raise ConfigError(f"e_mode: expected 'marginal' or 'logistic', got {self.e_mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StudyConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("<root>: expected a JSON object")
        d = dict(d)
        known = {f.name for f in fields(cls)} | {"mar"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown study field")
        if "scenario" in d:
            d["scenario"] = ScenarioConfig.from_dict(d["scenario"])
        mar = d.pop("mar", None)
        if mar is not None:
            if not isinstance(mar, Mapping):
                raise ConfigError("mar: expected a JSON object")
            extra = set(mar) - {"trial_fracs", "frac_nontrial", "trial_mar"}
            if extra:
                raise ConfigError(f"mar.{sorted(extra)[0]}: unknown field")
            d.update(mar)
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"<root>: {e}") from None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["mar"] = {
            "trial_fracs": list(d.pop("trial_fracs")),
            "frac_nontrial": d.pop("frac_nontrial"),
            "trial_mar": d.pop("trial_mar"),
        }
        d["methods"] = list(self.methods)
        d["interactions"] = list(self.interactions)
        return d

    @classmethod
    def from_json(cls, path: str | Path) -> "StudyConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"<json>: malformed JSON at line {e.lineno}: {e.msg}") from None
        return cls.from_dict(d)

    def cells(self) -> list[tuple[str, float | None]]:
        """(method, trial-missing level) pairs in reporting order."""
        out: list[tuple[str, float | None]] = []
        for m in METHODS:
            if m not in self.methods:
                continue
            if m == "FullData":
                out.append((m, None))
            elif m == "M1A":
                out.append((m, 0.0))
            else:
                out.extend((m, f) for f in self.trial_fracs)
        return out


@dataclass(frozen=True)
class Metrics:
    bias: float
    bias_mcse: float
    emp_se: float
    emp_se_mcse: float
    avg_robust_se: float
    mse: float
    mse_mcse: float
    n: int


def performance_metrics(estimates: Sequence[float], truth: float, robust_ses: Sequence[float] | None = None) -> Metrics:
    """Bias, empirical SE and MSE with their Monte Carlo standard errors."""
    est = np.asarray(estimates, dtype=float)
    n = est.size
    if n < 2:
        raise ValueError("performance metrics need at least 2 estimates")
    err = est - truth
    bias = float(err.mean())
    emp_se = float(est.std(ddof=1))
    sq = err**2
    mse = float(sq.mean())
    avg_rse = float(np.mean(robust_ses)) if robust_ses is not None and len(robust_ses) else math.nan
    return Metrics(
        bias=bias,
        bias_mcse=emp_se / math.sqrt(n),
        emp_se=emp_se,
        emp_se_mcse=emp_se / math.sqrt(2.0 * (n - 1)),
        avg_robust_se=avg_rse,
        mse=mse,
        mse_mcse=float(sq.std(ddof=1)) / math.sqrt(n),
        n=n,
    )


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence(list(key)).generate_state(1, dtype=np.uint64)[0] >> 1)


def _record(r: int, method: str, level: float | None, pop, **kw) -> dict:
    rec = {
        "replicate": r,
        "method": method,
        "trial_missing": level,
        "estimate": math.nan,
        "robust_se": math.nan,
        "m": 0,
        "true_pate_s0": pop.true_pate_s0,
        "true_pate_all": pop.true_pate_all,
        "realized_tate": pop.realized_tate,
        "error": "",
    }
    rec.update(kw)
    return rec


def run_replicate(cfg: StudyConfig, r: int) -> list[dict]:
    """All method estimates for replicate ``r``; failures are recorded, not raised."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, r]))
    pop = make_superpopulation(cfg.scenario, rng)
    rows: list[dict] = []

    def attempt(method: str, level: float | None, fn: Callable[[], tuple[float, float, int]]) -> None:
        try:
            est, se, m = fn()
            rows.append(_record(r, method, level, pop, estimate=est, robust_se=se, m=m))
        except Exception as e:  # exclude-and-count policy
            rows.append(_record(r, method, level, pop, error=f"{type(e).__name__}: {e}"))

    def ipsw(ds):
        res = ipsw_estimate(ds, cfg.scheme, cfg.e_mode)
        return res.estimate, res.robust_se, 0

    if "FullData" in cfg.methods:
        attempt("FullData", None, lambda: ipsw(pop.data))

    for li, level in enumerate(cfg.trial_fracs):
        spec = MarSpec(frac_nontrial=cfg.frac_nontrial, frac_trial=level, trial_rule=cfg.trial_mar)
        mar_rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, r, li, 999]))
        ds = induce_mar(pop.data, spec, mar_rng)
        if "CC" in cfg.methods:
            def cc(ds=ds):
                res = complete_case(ds, cfg.scheme, cfg.e_mode)
                return res.estimate, res.robust_se, 0
            attempt("CC", level, cc)
        for mi, kind in enumerate(MI_METHODS):
            if kind not in cfg.methods or (kind == "M1A" and level != 0.0):
                continue

            def mi_fn(ds=ds, kind=kind, mi=mi, li=li):
                spec_i = build_spec(
                    kind,
                    ds,
                    m_rule=cfg.m_rule,
                    seed=_seed(cfg.master_seed, r, li, mi),
                    interactions=cfg.interactions,
                    maxit=cfg.maxit,
                )
                pooled = psi_within(impute(ds, spec_i), cfg.scheme, cfg.e_mode)
                return pooled.estimate, pooled.se, pooled.m
            attempt(kind, level, mi_fn)
    return rows


def _level_key(level) -> str:
    return "NA" if level is None or (isinstance(level, float) and math.isnan(level)) else f"{level:g}"


@dataclass
class StudyResult:
    config: StudyConfig
    rows: list[dict]
    replicates: list[dict]
    estimands: dict[str, float]
    truth: float

    def cell(self, method: str, level: float | None = None) -> dict:
        key = _level_key(level)
        for row in self.rows:
            if row["method"] == method and row["trial_missing"] == key:
                return row
        raise KeyError((method, key))

    ROW_FIELDS = (
        "method", "trial_missing", "bias", "bias_mcse", "emp_se", "emp_se_mcse",
        "avg_robust_se", "mse", "mse_mcse", "n_completed", "n_failed",
    )
    REPLICATE_FIELDS = (
        "replicate", "method", "trial_missing", "estimate", "robust_se", "m",
        "true_pate_s0", "true_pate_all", "realized_tate", "error",
    )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.ROW_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row[k]) for k in self.ROW_FIELDS})

    def write_replicates_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.REPLICATE_FIELDS, lineterminator="\n")
            w.writeheader()
            for rec in self.replicates:
                out = dict(rec)
                out["trial_missing"] = _level_key(rec["trial_missing"])
                w.writerow({k: _fmt(out[k]) for k in self.REPLICATE_FIELDS})

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "truth": self.truth,
            "estimands": self.estimands,
            "rows": self.rows,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")

    def table(self) -> str:
        head = f"{'method':<9}{'level':>6}{'bias':>10}{'(mcse)':>9}{'emp_se':>9}{'rob_se':>9}{'mse':>9}{'n':>6}"
        lines = [head]
        for row in self.rows:
            lines.append(
                f"{row['method']:<9}{row['trial_missing']:>6}{row['bias']:>10.3f}({row['bias_mcse']:.3f})"
                f"{row['emp_se']:>9.3f}{row['avg_robust_se']:>9.3f}{row['mse']:>9.3f}{row['n_completed']:>6}"
            )
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def aggregate(cfg: StudyConfig, replicates: list[dict]) -> StudyResult:
    by_rep: dict[int, dict] = {}
    for rec in replicates:
        by_rep.setdefault(rec["replicate"], rec)
    truths_s0 = np.array([rec["true_pate_s0"] for rec in by_rep.values()])
    truths_all = np.array([rec["true_pate_all"] for rec in by_rep.values()])
    tates = np.array([rec["realized_tate"] for rec in by_rep.values()])
    truth = float((truths_s0 if cfg.truth == "pate_s0" else truths_all).mean())
    estimands = {
        "mean_true_pate_s0": float(truths_s0.mean()),
        "mean_true_pate_all": float(truths_all.mean()),
        "mean_realized_tate": float(tates.mean()),
        "sd_realized_tate": float(tates.std(ddof=1)) if tates.size > 1 else 0.0,
        "n_replicates": int(tates.size),
    }
    rows = []
    for method, level in cfg.cells():
        key = _level_key(level)
        recs = [x for x in replicates if x["method"] == method and _level_key(x["trial_missing"]) == key]
        good = [x for x in recs if not x["error"]]
        n_failed = len(recs) - len(good)
        if n_failed > MAX_FAIL_FRAC * len(recs):
            first = next(x["error"] for x in recs if x["error"])
            raise StudyError(
                f"method {method} (trial missing {key}) failed in {n_failed} of {len(recs)} replicates; "
                f"first error: {first}",
                method=method,
            )
        met = performance_metrics([x["estimate"] for x in good], truth, [x["robust_se"] for x in good])
        row = {"method": method, "trial_missing": key, **asdict(met), "n_completed": len(good), "n_failed": n_failed}
        del row["n"]
        rows.append(row)
    return StudyResult(cfg, rows, replicates, estimands, truth)


def run_study(
    cfg: StudyConfig,
    workers: int = 1,
    progress: Callable[[int, int], None] | None = None,
) -> StudyResult:
    job = partial(run_replicate, cfg)
    replicates: list[dict] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, recs in enumerate(ex.map(job, range(cfg.n_sim))):
                replicates.extend(recs)
                if progress:
                    progress(i + 1, cfg.n_sim)
    else:
        for i in range(cfg.n_sim):
            replicates.extend(job(i))
            if progress:
                progress(i + 1, cfg.n_sim)
    return aggregate(cfg, replicates)


__all__ = [
    "METHODS",
    "Metrics",
    "StudyConfig",
    "StudyError",
    "StudyResult",
    "aggregate",
    "performance_metrics",
    "run_replicate",
    "run_study",
]
