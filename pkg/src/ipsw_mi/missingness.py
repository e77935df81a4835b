"""Missing-at-random masking of one covariate, ranked on fully observed ones."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ipsw_mi.tabular import ColumnRole, Dataset


class MissingnessError(ValueError):
    pass


@dataclass(frozen=True)
class MarSpec:
    """Mask ``target_col`` for the rows with the largest ``sum(rank_cols)``.

    ``frac_nontrial`` applies within S=0 and ``frac_trial`` within S=1.
    ``trial_rule="random"`` instead masks a uniformly random subset of the
    trial rows (needs an rng).
    """

    target_col: str = "X1"
    rank_cols: tuple[str, ...] = ("X2", "X3")
    frac_nontrial: float = 0.30
    frac_trial: float = 0.0
    trial_rule: str = "ranked"

    def __post_init__(self) -> None:
        for name in ("frac_nontrial", "frac_trial"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MissingnessError(f"{name}: must lie in [0, 1], got {v!r}")
        if self.trial_rule not in ("ranked", "random"):
            raise MissingnessError(f"trial_rule: expected 'ranked' or 'random', got {self.trial_rule!r}")
        if self.target_col in self.rank_cols:
            raise MissingnessError("target_col cannot be one of rank_cols")
        object.__setattr__(self, "rank_cols", tuple(self.rank_cols))


def top_ranked(score: np.ndarray, rows: np.ndarray, frac: float) -> np.ndarray:
    """Indices (into the full table) of the ``floor(frac * len(rows))`` rows
    with the largest score; ties go to the lower row index."""
    k = int(np.floor(frac * rows.size + 1e-9))
    if k == 0:
        return rows[:0]
    # lexsort: last key is primary -> descending score, then ascending index
    order = np.lexsort((rows, -score[rows]))
    return rows[order[:k]]


def induce_mar(ds: Dataset, spec: MarSpec, rng: np.random.Generator | None = None) -> Dataset:
    s_name = ds.require(ColumnRole.TRIAL_INDICATOR)
    for c in (s_name, *spec.rank_cols):
        if c not in ds.columns:
            raise MissingnessError(f"unknown column {c!r}")
        if not ds.mask[c].all():
            raise MissingnessError(f"ranking column {c!r} must be fully observed")
    if spec.target_col not in ds.columns:
        raise MissingnessError(f"unknown column {spec.target_col!r}")
    if not ds.mask[spec.target_col].all():
        raise MissingnessError(f"target already has missingness: {spec.target_col!r}")

    score = np.zeros(ds.n_rows)
    for c in spec.rank_cols:
        score = score + ds[c]
    S = ds[s_name]
    rows0 = np.flatnonzero(S == 0)
    rows1 = np.flatnonzero(S == 1)
    hide = [top_ranked(score, rows0, spec.frac_nontrial)]
    if spec.trial_rule == "ranked":
        hide.append(top_ranked(score, rows1, spec.frac_trial))
    else:
        if rng is None:
            raise MissingnessError("trial_rule='random' needs an rng")
        k = int(np.floor(spec.frac_trial * rows1.size + 1e-9))
        hide.append(np.sort(rng.choice(rows1, size=k, replace=False)))
    obs = np.ones(ds.n_rows, dtype=bool)
    obs[np.concatenate(hide)] = False
    return ds.replace(mask={spec.target_col: obs})
