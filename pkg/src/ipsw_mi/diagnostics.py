"""Balance and overlap diagnostics for trial-versus-target comparisons."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ipsw_mi.ipsw import ess
from ipsw_mi.tabular import ColumnRole, Dataset

DEFAULT_BINS = 20


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class BalanceReport:
    asd_before: dict[str, float]
    asd_after: dict[str, float]
    tipton_index: float
    ess_trial: float
    n_trial: int

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        width = max([len("covariate")] + [len(c) for c in self.asd_before])
        lines = [f"{'covariate':<{width}}  {'ASD before':>10}  {'ASD after':>10}"]
        for c, before in self.asd_before.items():
            after = self.asd_after.get(c, float("nan"))
            lines.append(f"{c:<{width}}  {before:>10.4f}  {after:>10.4f}")
        lines.append(f"Tipton index: {self.tipton_index:.4f}")
        lines.append(f"ESS (trial): {self.ess_trial:.1f} of {self.n_trial}")
        return "\n".join(lines)


def _moments(x: np.ndarray, w: np.ndarray | None, binary: bool) -> tuple[float, float]:
    if w is None:
        w = np.ones(x.size)
    m = float(np.average(x, weights=w))
    if binary:
        return m, m * (1.0 - m)
    return m, float(np.average((x - m) ** 2, weights=w))


def asd(ds: Dataset, covariate: str, w: np.ndarray | None = None) -> float:
    """Absolute standardized difference of a covariate, trial versus target.

    ``|mean_1 - mean_0| / sqrt((var_1 + var_0) / 2)``.  With weights, trial
    moments are weighted (target rows stay unweighted).  Binary covariates use
    ``p (1 - p)`` variances.
    """
    s = ds.require(ColumnRole.TRIAL_INDICATOR)
    trial = ds[s] == 1
    x = ds[covariate]
    obs = ds.mask[covariate]
    t_rows = trial & obs
    g_rows = ~trial & obs
    if not t_rows.any() or not g_rows.any():
        raise DiagnosticsError(f"{covariate!r}: no observed rows in one of the groups")
    binary = bool(np.isin(x[obs], (0.0, 1.0)).all())
    wt = None if w is None else np.asarray(w, dtype=float)[t_rows]
    m1, v1 = _moments(x[t_rows], wt, binary)
    m0, v0 = _moments(x[g_rows], None, binary)
    pooled = (v1 + v0) / 2.0
    if pooled <= 0.0:
        raise DiagnosticsError(f"{covariate!r}: zero pooled variance")
    return abs(m1 - m0) / np.sqrt(pooled)


def tipton_index(ps_trial: np.ndarray, ps_target: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Binned Bhattacharyya overlap ``sum_b sqrt(f_b g_b)`` of two score
    distributions on equal-width bins over [0, 1]."""
    a = np.asarray(ps_trial, dtype=float)
    b = np.asarray(ps_target, dtype=float)
    if a.size == 0 or b.size == 0:
        raise DiagnosticsError("both samples must be non-empty")
    if bins < 2:
        raise DiagnosticsError("bins must be >= 2")
    edges = np.linspace(0.0, 1.0, bins + 1)
    # integer counts keep the identical-sample case exactly 1
    f = np.histogram(np.clip(a, 0.0, 1.0), bins=edges)[0].astype(float)
    g = np.histogram(np.clip(b, 0.0, 1.0), bins=edges)[0].astype(float)
    return float(min(1.0, np.sum(np.sqrt(f * g)) / np.sqrt(float(a.size) * float(b.size))))


def ps_histograms(ps_trial: np.ndarray, ps_target: np.ndarray, bins: int = DEFAULT_BINS) -> list[dict]:
    edges = np.linspace(0.0, 1.0, bins + 1)
    f = np.histogram(np.clip(ps_trial, 0, 1), bins=edges)[0]
    g = np.histogram(np.clip(ps_target, 0, 1), bins=edges)[0]
    return [
        {"bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "n_trial": int(f[i]), "n_target": int(g[i])}
        for i in range(bins)
    ]


def balance_report(
    ds: Dataset,
    ps: np.ndarray,
    w: np.ndarray,
    covariates: Sequence[str] | None = None,
    bins: int = DEFAULT_BINS,
) -> BalanceReport:
    s = ds.require(ColumnRole.TRIAL_INDICATOR)
    trial = ds[s] == 1
    covariates = ds.covariates if covariates is None else list(covariates)
    w = np.asarray(w, dtype=float)
    return BalanceReport(
        asd_before={c: float(asd(ds, c)) for c in covariates},
        asd_after={c: float(asd(ds, c, w)) for c in covariates},
        tipton_index=tipton_index(ps[trial], ps[~trial], bins),
        ess_trial=ess(w[trial]),
        n_trial=int(trial.sum()),
    )


__all__ = ["BalanceReport", "asd", "balance_report", "ess", "ps_histograms", "tipton_index"]
