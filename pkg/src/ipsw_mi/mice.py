"""Multiple imputation by chained equations.

Continuous columns are imputed by predictive mean matching (type-1 matching,
5 donors), binary columns by logistic regression with a posterior coefficient
draw.  Derived product columns are either imputed like any other variable
(``active``) or recomputed from their imputed sources (``passive``).

The five model builders reproduce the imputation models compared in the
simulation study:

========  ==================  ===============================================
kind      rows used           variables
========  ==================  ===============================================
M1A       non-trial only      covariates
M1B       all rows            covariates
M2        all rows            covariates, S, Y, A
M3A       all rows            as M2 plus covariate-by-A products, active
M3B       all rows            as M2 plus covariate-by-A products, passive
========  ==================  ===============================================
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ipsw_mi.glm import GlmError, draw_coef, fit_logistic, fit_wls
from ipsw_mi.tabular import ColumnRole, Dataset, add_derived_product

KINDS = ("M1A", "M1B", "M2", "M3A", "M3B")
DONOR_K = 5
MAXIT = 5


class ImputationError(RuntimeError):
    def __init__(self, message: str, column: str | None = None, iteration: int | None = None,
                 chain: int | None = None):
        super().__init__(message)
        self.column = column
        self.iteration = iteration
        self.chain = chain


@dataclass(frozen=True)
class ColumnModel:
    target: str
    predictors: tuple[str, ...]
    method: str = "pmm"
    donor_k: int = DONOR_K

    def __post_init__(self) -> None:
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.target in self.predictors:
            raise ImputationError(f"{self.target!r} cannot predict itself", column=self.target)
        if self.method not in ("pmm", "logistic"):
            raise ImputationError(f"unknown method {self.method!r}", column=self.target)


@dataclass(frozen=True)
class DerivedColumn:
    a: str
    b: str
    out: str
    mode: str = "passive"

    def __post_init__(self) -> None:
        if self.mode not in ("active", "passive"):
            raise ImputationError(f"derived mode must be active or passive, got {self.mode!r}")


@dataclass(frozen=True)
class ImputationSpec:
    row_scope: str
    column_models: tuple[ColumnModel, ...]
    derived: tuple[DerivedColumn, ...] = ()
    m: int = 5
    maxit: int = MAXIT
    seed: int = 0
    kind: str | None = None

    def __post_init__(self) -> None:
        if self.row_scope not in ("nontrial_only", "superpopulation"):
            raise ImputationError(f"unknown row_scope {self.row_scope!r}")
        if self.m < 1 or self.maxit < 1:
            raise ImputationError("m and maxit must be >= 1")
        object.__setattr__(self, "column_models", tuple(self.column_models))
        object.__setattr__(self, "derived", tuple(self.derived))
        targets = [cm.target for cm in self.column_models]
        if len(set(targets)) != len(targets):
            raise ImputationError("a column has more than one model")
        for d in self.derived:
            if d.mode == "passive" and d.out in targets:
                raise ImputationError(f"passive column {d.out!r} must not have a model", column=d.out)

    @property
    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for cm in self.column_models:
            seen[cm.target] = None
            for p in cm.predictors:
                seen[p] = None
        for d in self.derived:
            for n in (d.a, d.b, d.out):
                seen[n] = None
        return list(seen)


@dataclass
class ImputedSet:
    datasets: list[Dataset]
    spec: ImputationSpec
    chain_log: list[dict] = field(default_factory=list, repr=False)

    @property
    def m(self) -> int:
        return len(self.datasets)

    def write_chain_log(self, path: str | Path) -> None:
        cols = ["chain", "iteration", "column", "n_imputed", "mean", "sd"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in self.chain_log:
                w.writerow(row)


# ---------------------------------------------------------------------------
# univariate imputation methods
# ---------------------------------------------------------------------------

def _keep_varying(X_obs: np.ndarray) -> np.ndarray:
    # predictors constant on the fitting rows carry no information (e.g. S
    # when only trial rows have the target observed)
    if X_obs.shape[1] == 0:
        return np.zeros(0, dtype=bool)
    return np.ptp(X_obs, axis=0) > 0


def _with_intercept(X: np.ndarray, keep: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X[:, keep]])


def nearest_donors(yhat_obs: np.ndarray, yhat_mis: np.ndarray, k: int) -> np.ndarray:
    """(n_mis, k) indices into ``yhat_obs`` of the k closest predicted values,
    nearest first."""
    n = yhat_obs.size
    if k > n:
        raise ImputationError(f"need at least {k} donors, got {n}")
    order = np.argsort(yhat_obs, kind="stable")
    # sentinels on both ends remove the boundary checks from the walk
    sv = np.concatenate([np.full(k, -np.inf), yhat_obs[order], np.full(k, np.inf)])
    pos = np.searchsorted(sv, yhat_mis)
    left = pos - 1
    right = pos.copy()
    out = np.empty((k, yhat_mis.size), dtype=np.intp)
    for j in range(k):
        # walk outwards from the insertion point; ties go to the left
        take_left = (yhat_mis - sv[left]) <= (sv[right] - yhat_mis)
        np.copyto(out[j], right)
        np.copyto(out[j], left, where=take_left)
        left -= take_left
        right += ~take_left
    return order[out.T - k]


def _pmm_design(y_obs, D_obs, D_mis, k, rng, draw=True, coef=None):
    """PMM on designs that already carry an intercept column."""
    if y_obs.size < k:
        raise ImputationError(f"pmm needs at least {k} observed rows, got {y_obs.size}")
    fit = fit_wls(D_obs, y_obs, robust=False, intercept=False)
    if coef is not None:
        beta_star = np.asarray(coef, dtype=float)
    elif draw:
        beta_star = draw_coef(fit, rng)
    else:
        beta_star = fit.coef
    yhat_obs = D_obs @ fit.coef
    yhat_mis = D_mis @ beta_star
    donors = nearest_donors(yhat_obs, yhat_mis, k)
    pick = rng.integers(0, k, size=yhat_mis.size)
    return y_obs[donors[np.arange(yhat_mis.size), pick]]


def _logistic_design(y_obs, D_obs, D_mis, rng, draw=True, coef=None):
    if coef is not None:
        beta_star = np.asarray(coef, dtype=float)
    else:
        if y_obs.min() == y_obs.max():
            raise ImputationError("binary target has a single observed class")
        fit = fit_logistic(D_obs, y_obs, robust=False, intercept=False)
        beta_star = draw_coef(fit, rng) if draw else fit.coef
    p = expit(D_mis @ beta_star)
    return (rng.random(p.size) < p).astype(float)


def _split(target, predictors, mask):
    target = np.asarray(target, dtype=float)
    X = np.asarray(predictors, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    mask = np.asarray(mask, dtype=bool)
    return target, X, mask


def pmm_impute(
    target: np.ndarray,
    predictors: np.ndarray,
    mask: np.ndarray,
    donor_k: int,
    rng: np.random.Generator,
    draw: bool = True,
    coef: np.ndarray | None = None,
) -> np.ndarray:
    """Fill the unobserved entries of ``target`` by predictive mean matching.

    Predictors constant on the observed rows are dropped.  A linear model
    is fitted on the observed rows.  Donor predictions use the
    fitted coefficients, recipient predictions use a posterior draw (or
    ``coef`` if given, intercept first, or the fit itself when
    ``draw=False``).  Each
    recipient copies the observed value of one of its ``donor_k`` nearest
    donors, chosen uniformly.
    """
    y, X, obs = _split(target, predictors, mask)
    out = y.copy()
    if obs.all():
        return out
    keep = _keep_varying(X[obs])
    D = _with_intercept(X, keep)
    out[~obs] = _pmm_design(y[obs], D[obs], D[~obs], donor_k, rng, draw=draw, coef=coef)
    return out


def logistic_impute(
    target: np.ndarray,
    predictors: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    draw: bool = True,
    coef: np.ndarray | None = None,
) -> np.ndarray:
    """Fill unobserved 0/1 entries with Bernoulli draws from a logistic model
    fitted on the observed rows (coefficients drawn from their posterior)."""
    y, X, obs = _split(target, predictors, mask)
    out = y.copy()
    if obs.all():
        return out
    keep = _keep_varying(X[obs])
    D = _with_intercept(X, keep)
    out[~obs] = _logistic_design(y[obs], D[obs], D[~obs], rng, draw=draw, coef=coef)
    return out


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def _is_binary(ds: Dataset, name: str) -> bool:
    v = ds[name][ds.mask[name]]
    return v.size > 0 and bool(np.isin(v, (0.0, 1.0)).all())


def paper_percent_m(ds: Dataset, covariates: Sequence[str] | None = None) -> int:
    """Percentage of incomplete rows (any masked covariate), rounded half up,
    at least 2."""
    covariates = ds.covariates if covariates is None else list(covariates)
    if not covariates:
        return 2
    incomplete = np.zeros(ds.n_rows, dtype=bool)
    for c in covariates:
        incomplete |= ~ds.mask[c]
    pct = 100.0 * incomplete.sum() / ds.n_rows
    return max(2, int(math.floor(pct + 0.5)))


def build_spec(
    kind: str,
    ds: Dataset,
    m_rule: str | int = "paper_percent",
    seed: int = 0,
    interactions: Sequence[str] | None = None,
    maxit: int = MAXIT,
    donor_k: int = DONOR_K,
) -> ImputationSpec:
    """Imputation spec for one of the M1A/M1B/M2/M3A/M3B models.

    ``m_rule`` is ``"paper_percent"`` or an explicit number of imputations.
    ``interactions`` lists the covariates multiplied by treatment under M3A/B
    (default: every covariate).
    """
    if kind not in KINDS:
        raise ImputationError(f"unknown imputation model {kind!r}; expected one of {KINDS}")
    s = ds.require(ColumnRole.TRIAL_INDICATOR)
    a = ds.require(ColumnRole.TREATMENT)
    y = ds.require(ColumnRole.OUTCOME)
    covs = ds.covariates
    trial = ds[s] == 1

    if kind == "M1A":
        scope = "nontrial_only"
        masked_trial = [c for c in covs if not ds.mask[c][trial].all()]
        if masked_trial:
            raise ImputationError(
                "M1A is only applicable when there is no missing data in the trial "
                f"(masked trial rows in {masked_trial})"
            )
        in_scope = ~trial
    else:
        scope = "superpopulation"
        in_scope = np.ones(ds.n_rows, dtype=bool)

    def masked_count(name: str) -> int:
        return int(np.count_nonzero(~ds.mask[name][in_scope]))

    def method(name: str) -> str:
        return "logistic" if _is_binary(ds, name) else "pmm"

    derived: list[DerivedColumn] = []
    if kind in ("M1A", "M1B"):
        variables = list(covs)
    else:
        variables = list(covs) + [s, y, a]
        if kind in ("M3A", "M3B"):
            mode = "active" if kind == "M3A" else "passive"
            inter = list(covs) if interactions is None else list(interactions)
            for c in inter:
                if c not in covs:
                    raise ImputationError(f"interaction covariate {c!r} is not a covariate")
                derived.append(DerivedColumn(c, a, f"{c}{a}", mode))
    outs = {d.out: d for d in derived}

    def depends_on(col: str, target: str) -> bool:
        d = outs.get(col)
        return d is not None and target in (d.a, d.b)

    base_models: list[ColumnModel] = []
    active_models: list[ColumnModel] = []
    pool = variables + [d.out for d in derived]
    for v in variables:
        if masked_count(v) == 0:
            continue
        preds = tuple(p for p in pool if p != v and not depends_on(p, v))
        base_models.append(ColumnModel(v, preds, method(v), donor_k))
    for d in derived:
        if d.mode != "active":
            continue
        has_missing = masked_count(d.a) > 0 or masked_count(d.b) > 0
        if not has_missing:
            continue
        preds = tuple(p for p in pool if p != d.out)
        active_models.append(ColumnModel(d.out, preds, "pmm", donor_k))

    def n_mis(cm: ColumnModel) -> int:
        if cm.target in outs:
            d = outs[cm.target]
            return int(np.count_nonzero(~(ds.mask[d.a] & ds.mask[d.b])[in_scope]))
        return masked_count(cm.target)

    base_models.sort(key=n_mis)
    active_models.sort(key=n_mis)

    if m_rule == "paper_percent":
        m = paper_percent_m(ds, covs)
    else:
        try:
            m = int(m_rule)
        except (TypeError, ValueError):
            raise ImputationError(f"m_rule must be 'paper_percent' or an integer, got {m_rule!r}") from None
        if m < 1:
            raise ImputationError("explicit m must be >= 1")
    return ImputationSpec(
        row_scope=scope,
        column_models=tuple(base_models + active_models),
        derived=tuple(derived),
        m=m,
        maxit=maxit,
        seed=seed,
        kind=kind,
    )


# ---------------------------------------------------------------------------
# chained equations
# ---------------------------------------------------------------------------

def _prepare(ds: Dataset, spec: ImputationSpec) -> Dataset:
    for d in spec.derived:
        if d.out not in ds.columns:
            ds = add_derived_product(ds, d.a, d.b, d.out)
    missing = [v for v in spec.variables if v not in ds.columns]
    if missing:
        raise ImputationError(f"spec refers to unknown columns {missing}")
    return ds


def impute(ds: Dataset, spec: ImputationSpec) -> ImputedSet:
    """Run ``spec.m`` independent chains of ``spec.maxit`` sweeps each.

    Chain ``j`` draws from a stream seeded by ``(spec.seed, j)``, so any
    subset of chains can be reproduced alone.  Only cells masked within the
    row scope are changed; their mask is set to observed in the outputs.
    """
    ds = _prepare(ds, spec)
    s_name = ds.require(ColumnRole.TRIAL_INDICATOR)
    if spec.row_scope == "nontrial_only":
        rows = np.flatnonzero(ds[s_name] == 0)
    else:
        rows = np.arange(ds.n_rows)

    names = spec.variables
    # column 0 of the working matrix is the intercept
    col = {n: j + 1 for j, n in enumerate(names)}
    base = np.column_stack([np.ones(rows.size)] + [ds[n][rows] for n in names])
    obs = np.column_stack([np.ones(rows.size, dtype=bool)] + [ds.mask[n][rows] for n in names])

    modeled = {cm.target for cm in spec.column_models}
    passive = [d for d in spec.derived if d.mode == "passive"]
    passive_out = {d.out for d in passive}
    for n in names:
        if not obs[:, col[n]].all() and n not in modeled and n not in passive_out:
            raise ImputationError(f"column {n!r} has missing values in scope but no model", column=n)
    for cm in spec.column_models:
        if obs[:, col[cm.target]].sum() == 0:
            raise ImputationError(f"column {cm.target!r} has no observed values in scope", column=cm.target)

    plans = []
    for cm in spec.column_models:
        t = col[cm.target]
        o = obs[:, t]
        o_rows = np.flatnonzero(o)
        # drop predictors that are fully observed and constant on the fitting
        # rows; they stay constant because they are never imputed there
        design = [0]
        for p in cm.predictors:
            pc = obs[o_rows, col[p]]
            vals = base[o_rows, col[p]]
            if pc.all() and vals.size and vals.min() == vals.max():
                continue
            design.append(col[p])
        plans.append((cm, t, design, o_rows, np.flatnonzero(~o)))
    passive_plan = [
        (col[d.out], col[d.a], col[d.b], np.flatnonzero(~obs[:, col[d.out]])) for d in passive
    ]

    def refresh_passive(V: np.ndarray, changed: int | None) -> None:
        for o, a, b, mis in passive_plan:
            if changed is None or changed in (a, b):
                V[mis, o] = V[mis, a] * V[mis, b]

    datasets: list[Dataset] = []
    log: list[dict] = []
    for chain in range(spec.m):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, chain]))
        V = base.copy()
        for cm, t, _, o_rows, m_rows in plans:
            if m_rows.size:
                V[m_rows, t] = rng.choice(V[o_rows, t], size=m_rows.size, replace=True)
        refresh_passive(V, None)

        for it in range(1, spec.maxit + 1):
            for cm, t, design, o_rows, m_rows in plans:
                if m_rows.size == 0:
                    continue
                D = V[:, design]
                try:
                    if cm.method == "pmm":
                        vals = _pmm_design(V[o_rows, t], D[o_rows], D[m_rows], cm.donor_k, rng)
                    else:
                        vals = _logistic_design(V[o_rows, t], D[o_rows], D[m_rows], rng)
                except (GlmError, ImputationError, np.linalg.LinAlgError) as e:
                    raise ImputationError(
                        f"imputation of column {cm.target!r} failed at iteration {it} "
                        f"(chain {chain}): {e}",
                        column=cm.target,
                        iteration=it,
                        chain=chain,
                    ) from e
                V[m_rows, t] = vals
                refresh_passive(V, t)
                log.append({
                    "chain": chain,
                    "iteration": it,
                    "column": cm.target,
                    "n_imputed": int(m_rows.size),
                    "mean": float(vals.mean()),
                    "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                })

        values, masks = {}, {}
        for n in names:
            j = col[n]
            if obs[:, j].all():
                continue
            full_v = np.array(ds[n], dtype=float)
            full_m = np.array(ds.mask[n], dtype=bool)
            full_v[rows] = V[:, j]
            full_m[rows] = True
            values[n] = full_v
            masks[n] = full_m
        datasets.append(ds.replace(values=values, mask=masks))
    return ImputedSet(datasets, spec, log)
