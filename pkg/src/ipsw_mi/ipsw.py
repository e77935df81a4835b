"""Inverse probability of sampling weighting.

The sampling score ``p(X) = P(S=1 | X)`` comes from a main-effects logistic
regression of the trial indicator on the covariates.  Trial rows are weighted
either to the whole target population (``GENERALIZE``, ``1 / (p e_a)``) or to
the non-trial rows only (``TRANSPORT``, inverse odds ``(1-p)/p`` times the
marginal odds of trial membership).  The effect estimate is the coefficient
on treatment in a weighted regression of the outcome on treatment, fitted on
trial rows.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial
from typing import Callable, Sequence

import numpy as np

from ipsw_mi.glm import GlmFit, fit_logistic, fit_wls, predict_proba
from ipsw_mi.mice import ImputedSet
from ipsw_mi.tabular import ColumnRole, Dataset


class EstimationError(RuntimeError):
    pass


class WeightScheme(str, enum.Enum):
    GENERALIZE = "generalize"
    TRANSPORT = "transport"


@dataclass(frozen=True)
class EstimateResult:
    estimate: float
    robust_se: float
    model_se: float
    n_used: int
    weights_summary: tuple[float, float, float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights_summary"] = dict(zip(("min", "max", "sum", "ess"), self.weights_summary))
        return d


@dataclass(frozen=True)
class PooledEstimate:
    estimate: float
    within_var: float
    between_var: float
    total_var: float
    m: int
    estimates: tuple[float, ...] = ()

    @property
    def se(self) -> float:
        return math.sqrt(self.total_var)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["se"] = self.se
        d["estimates"] = list(self.estimates)
        return d


def _names(ds: Dataset) -> tuple[str, str, str]:
    return (
        ds.require(ColumnRole.TRIAL_INDICATOR),
        ds.require(ColumnRole.TREATMENT),
        ds.require(ColumnRole.OUTCOME),
    )


def fit_ps(ds: Dataset, covariates: Sequence[str] | None = None) -> GlmFit:
    s, _, _ = _names(ds)
    covariates = ds.covariates if covariates is None else list(covariates)
    for c in (s, *covariates):
        if not ds.mask[c].all():
            raise EstimationError(f"column {c!r} must be fully observed to estimate the sampling score")
    X = np.column_stack([ds[c] for c in covariates]) if covariates else np.zeros((ds.n_rows, 0))
    return fit_logistic(X, ds[s], names=covariates, robust=False)


def estimate_ps(ds: Dataset, covariates: Sequence[str] | None = None) -> np.ndarray:
    """Fitted ``P(S=1 | X)`` for every row."""
    covariates = ds.covariates if covariates is None else list(covariates)
    fit = fit_ps(ds, covariates)
    X = np.column_stack([ds[c] for c in covariates]) if covariates else np.zeros((ds.n_rows, 0))
    return predict_proba(fit, X)


def treatment_prob(ds: Dataset, mode: str = "marginal", covariates: Sequence[str] | None = None) -> np.ndarray:
    """Probability of the treatment actually received, ``e_a``, on trial rows
    (NaN elsewhere).

    ``marginal`` uses the arm fractions in the trial; ``logistic`` fits
    ``P(A=1 | X)`` among trial rows.
    """
    s, a, _ = _names(ds)
    trial = ds[s] == 1
    if not ds.mask[a][trial].all():
        raise EstimationError("treatment must be observed on every trial row")
    A = ds[a]
    out = np.full(ds.n_rows, np.nan)
    n1 = int(A[trial].sum())
    if n1 == 0 or n1 == int(trial.sum()):
        raise EstimationError("single-arm trial")
    if mode == "marginal":
        e1 = np.full(ds.n_rows, n1 / trial.sum())
    elif mode == "logistic":
        covariates = ds.covariates if covariates is None else list(covariates)
        X = np.column_stack([ds[c] for c in covariates])
        fit = fit_logistic(X[trial], A[trial], robust=False)
        e1 = predict_proba(fit, X)
    else:
        raise EstimationError(f"unknown treatment-probability mode {mode!r}")
    out[trial] = np.where(A[trial] == 1, e1[trial], 1.0 - e1[trial])
    return out


def compute_weights(
    ds: Dataset,
    ps: np.ndarray,
    e_a: np.ndarray | None,
    scheme: WeightScheme | str = WeightScheme.GENERALIZE,
) -> np.ndarray:
    scheme = WeightScheme(scheme)
    s, _, _ = _names(ds)
    trial = ds[s] == 1
    p = np.asarray(ps, dtype=float)[trial]
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise EstimationError("sampling score is 0 or 1 on a trial row")
    w = np.zeros(ds.n_rows)
    if scheme is WeightScheme.GENERALIZE:
        if e_a is None:
            raise EstimationError("generalize weights need treatment probabilities")
        e = np.asarray(e_a, dtype=float)[trial]
        if np.any(~(e > 0.0)):
            raise EstimationError("treatment probability must be positive on trial rows")
        w[trial] = 1.0 / (p * e)
    else:
        p1 = trial.mean()
        w[trial] = (1.0 - p) / p * (p1 / (1.0 - p1))
    return w


def ess(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.sum(w**2))
    if s2 == 0.0:
        raise EstimationError("all weights are zero")
    return float(np.sum(w)) ** 2 / s2


def estimate_pate(ds: Dataset, w: np.ndarray) -> EstimateResult:
    """Weighted regression of outcome on treatment over trial rows; the
    treatment coefficient is the effect estimate."""
    s, a, y = _names(ds)
    w = np.asarray(w, dtype=float)
    use = (ds[s] == 1) & (w > 0)
    if not (ds.mask[a][use].all() and ds.mask[y][use].all()):
        raise EstimationError("treatment and outcome must be observed on weighted rows")
    A = ds[a][use]
    for arm in (0.0, 1.0):
        if np.count_nonzero(A == arm) < 2:
            raise EstimationError(f"fewer than 2 weighted rows in arm A={int(arm)}")
    fit = fit_wls(A, ds[y][use], w[use], names=[a])
    wu = w[use]
    return EstimateResult(
        estimate=float(fit.coef[1]),
        robust_se=float(np.sqrt(fit.cov_robust[1, 1])),
        model_se=float(np.sqrt(fit.cov_model[1, 1])),
        n_used=int(use.sum()),
        weights_summary=(float(wu.min()), float(wu.max()), float(wu.sum()), ess(wu)),
    )


def ipsw_estimate(
    ds: Dataset,
    scheme: WeightScheme | str = WeightScheme.GENERALIZE,
    e_mode: str = "marginal",
    covariates: Sequence[str] | None = None,
) -> EstimateResult:
    """Sampling score, weights and weighted regression on one complete dataset."""
    ps = estimate_ps(ds, covariates)
    e_a = treatment_prob(ds, e_mode, covariates) if WeightScheme(scheme) is WeightScheme.GENERALIZE else None
    w = compute_weights(ds, ps, e_a, scheme)
    return estimate_pate(ds, w)


def rubin_pool(estimates: Sequence[float], variances: Sequence[float]) -> PooledEstimate:
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = q.size
    if m < 1:
        raise EstimationError("nothing to pool")
    within = float(u.mean())
    # identical estimates must pool to exactly zero between-variance
    between = float(q.var(ddof=1)) if m > 1 and np.ptp(q) > 0 else 0.0
    return PooledEstimate(
        estimate=float(q.mean()),
        within_var=within,
        between_var=between,
        total_var=within + (1.0 + 1.0 / m) * between,
        m=m,
        estimates=tuple(float(x) for x in q),
    )


def psi_within(
    imputed: ImputedSet,
    scheme: WeightScheme | str = WeightScheme.GENERALIZE,
    e_mode: str = "marginal",
    covariates: Sequence[str] | None = None,
) -> PooledEstimate:
    """Full IPSW analysis inside every imputed dataset, pooled by Rubin's
    rules on the robust variances."""
    results = []
    for i, d in enumerate(imputed.datasets):
        try:
            results.append(ipsw_estimate(d, scheme, e_mode, covariates))
        except Exception as e:
            raise EstimationError(f"IPSW failed in imputed dataset {i}: {e}") from e
    return rubin_pool([r.estimate for r in results], [r.robust_se**2 for r in results])


def complete_rows(ds: Dataset, covariates: Sequence[str] | None = None) -> np.ndarray:
    """Rows with every covariate observed and, on trial rows, A and Y observed."""
    s, a, y = _names(ds)
    covariates = ds.covariates if covariates is None else list(covariates)
    keep = np.ones(ds.n_rows, dtype=bool)
    for c in covariates:
        keep &= ds.mask[c]
    trial = ds[s] == 1
    keep &= ~trial | (ds.mask[a] & ds.mask[y])
    return keep


def complete_case(
    ds: Dataset,
    scheme: WeightScheme | str = WeightScheme.GENERALIZE,
    e_mode: str = "marginal",
    covariates: Sequence[str] | None = None,
) -> EstimateResult:
    s, _, _ = _names(ds)
    sub = ds.subset(complete_rows(ds, covariates))
    n1 = int(np.count_nonzero(sub[s] == 1))
    if n1 == 0:
        raise EstimationError("no complete trial rows")
    if n1 == sub.n_rows:
        raise EstimationError("no complete non-trial rows")
    return ipsw_estimate(sub, scheme, e_mode, covariates)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    se: float
    estimates: tuple[float, ...]
    n_failed: int
    B: int


class BootstrapError(RuntimeError):
    pass


def stratified_resample(ds: Dataset, rng: np.random.Generator) -> Dataset:
    """Resample rows with replacement separately within S=1 and S=0."""
    s = ds.require(ColumnRole.TRIAL_INDICATOR)
    parts = []
    for level in (1.0, 0.0):
        idx = np.flatnonzero(ds[s] == level)
        if idx.size:
            parts.append(rng.choice(idx, size=idx.size, replace=True))
    return ds.subset(np.concatenate(parts))


def _one_resample(seed: int, ds: Dataset, pipeline: Callable[[Dataset, int], float]) -> float:
    rng = np.random.default_rng(seed)
    bs = stratified_resample(ds, rng)
    try:
        return float(pipeline(bs, int(rng.integers(2**31))))
    except Exception:
        return math.nan


def bootstrap(
    ds: Dataset,
    pipeline: Callable[[Dataset, int], float],
    B: int,
    rng: np.random.Generator,
    workers: int = 1,
    max_fail: float = 0.01,
) -> BootstrapResult:
    """Stratified bootstrap of ``pipeline(dataset, seed) -> estimate``.

    Resample ``b`` is seeded from a pre-drawn list, so the result does not
    depend on ``workers``.  Failed resamples are skipped and counted.
    """
    if B < 2:
        raise BootstrapError("B must be at least 2")
    seeds = [int(x) for x in rng.integers(0, 2**63 - 1, size=B)]
    job = partial(_one_resample, ds=ds, pipeline=pipeline)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            ests = list(ex.map(job, seeds, chunksize=max(1, B // (4 * workers))))
    else:
        ests = [job(sd) for sd in seeds]
    arr = np.array(ests)
    ok = np.isfinite(arr)
    n_failed = int((~ok).sum())
    if n_failed > max_fail * B:
        raise BootstrapError(f"{n_failed} of {B} bootstrap resamples failed")
    if ok.sum() < 2:
        raise BootstrapError("fewer than 2 successful bootstrap resamples")
    return BootstrapResult(float(arr[ok].std(ddof=1)), tuple(arr[ok]), n_failed, B)


def bootstrap_se(
    ds: Dataset,
    pipeline: Callable[[Dataset, int], float],
    B: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> float:
    return bootstrap(ds, pipeline, B, rng, workers).se
