"""Column-oriented dataset with typed roles and an explicit missingness mask.

Masked cells are stored as ``0.0`` in the value arrays; the mask (``True`` =
observed) is the only source of truth about missingness.  Input arrays use
``NaN`` to flag missing entries, CSV files use an empty field or ``NA``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MISSING_TOKENS = frozenset({"", "NA"})


class DatasetError(ValueError):
    """Raised when a dataset violates a structural invariant."""


class ColumnRole(str, enum.Enum):
    COVARIATE = "covariate"
    TRIAL_INDICATOR = "trial"
    TREATMENT = "treatment"
    OUTCOME = "outcome"
    WEIGHT = "weight"
    DERIVED = "derived"

    @classmethod
    def parse(cls, text: str) -> "ColumnRole":
        key = text.strip().lower()
        aliases = {"trialindicator": "trial", "s": "trial", "a": "treatment", "y": "outcome"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise DatasetError(f"unknown column role {text!r}") from None


SINGLETON_ROLES = (
    ColumnRole.TRIAL_INDICATOR,
    ColumnRole.TREATMENT,
    ColumnRole.OUTCOME,
    ColumnRole.WEIGHT,
)
BINARY_ROLES = (ColumnRole.TRIAL_INDICATOR, ColumnRole.TREATMENT)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable table of float columns, each with a role and an observed-mask.

    Every operation that "changes" a dataset returns a new one; the value and
    mask arrays are read-only so datasets can be shared between workers.
    """

    n_rows: int
    columns: Mapping[str, np.ndarray]
    roles: Mapping[str, ColumnRole]
    mask: Mapping[str, np.ndarray]
    recipes: Mapping[str, tuple[str, str]] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def role_name(self, role: ColumnRole) -> str | None:
        """Name of the (unique) column carrying a singleton role, if any."""
        for name, r in self.roles.items():
            if r is role:
                return name
        return None

    def require(self, role: ColumnRole) -> str:
        name = self.role_name(role)
        if name is None:
            raise DatasetError(f"dataset has no {role.value} column")
        return name

    @property
    def covariates(self) -> list[str]:
        return [n for n, r in self.roles.items() if r is ColumnRole.COVARIATE]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def observed(self, name: str) -> np.ndarray:
        return self.mask[name]

    def n_masked(self, name: str) -> int:
        return int(self.n_rows - np.count_nonzero(self.mask[name]))

    def is_complete(self, names: Iterable[str] | None = None) -> bool:
        names = self.names if names is None else names
        return all(bool(self.mask[n].all()) for n in names)

    def as_nan(self, name: str) -> np.ndarray:
        """Copy of a column with masked entries set to NaN."""
        out = np.array(self.columns[name], dtype=float)
        out[~self.mask[name]] = np.nan
        return out

    def replace(
        self,
        values: Mapping[str, np.ndarray] | None = None,
        mask: Mapping[str, np.ndarray] | None = None,
    ) -> "Dataset":
        """New dataset with some existing columns' values and/or masks swapped."""
        values = values or {}
        mask = mask or {}
        unknown = (set(values) | set(mask)) - set(self.columns)
        if unknown:
            raise DatasetError(f"unknown columns {sorted(unknown)}")
        cols = dict(self.columns)
        msk = dict(self.mask)
        for name, v in values.items():
            v = np.array(v, dtype=float)
            if v.shape != (self.n_rows,):
                raise DatasetError(f"length mismatch for column {name!r}")
            cols[name] = v
        for name, m in mask.items():
            m = np.array(m, dtype=bool)
            if m.shape != (self.n_rows,):
                raise DatasetError(f"length mismatch for mask of {name!r}")
            msk[name] = m
        for name in set(values) | set(mask):
            c = np.array(cols[name], dtype=float)
            c[~msk[name]] = 0.0
            cols[name] = _frozen(c)
            msk[name] = _frozen(np.array(msk[name]))
        return Dataset(self.n_rows, cols, dict(self.roles), msk, dict(self.recipes))

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows selected by a boolean mask or an integer index array."""
        rows = np.asarray(rows)
        cols = {n: _frozen(np.asarray(c)[rows].copy()) for n, c in self.columns.items()}
        msk = {n: _frozen(np.asarray(m)[rows].copy()) for n, m in self.mask.items()}
        n = int(np.count_nonzero(rows)) if rows.dtype == bool else int(rows.size)
        return Dataset(n, cols, dict(self.roles), msk, dict(self.recipes))

    def drop(self, names: Iterable[str]) -> "Dataset":
        names = set(names)
        keep = [n for n in self.columns if n not in names]
        return Dataset(
            self.n_rows,
            {n: self.columns[n] for n in keep},
            {n: self.roles[n] for n in keep},
            {n: self.mask[n] for n in keep},
            {k: v for k, v in self.recipes.items() if k in keep},
        )

    def check_derived(self) -> bool:
        """True when every derived column equals the product of its sources
        wherever all three entries are observed."""
        for out, (a, b) in self.recipes.items():
            ok = self.mask[out] & self.mask[a] & self.mask[b]
            if not np.array_equal(self.columns[out][ok], self.columns[a][ok] * self.columns[b][ok]):
                return False
        return True

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame({n: self.as_nan(n) for n in self.columns})


def build_dataset(
    columns: Mapping[str, Iterable[float]],
    roles: Mapping[str, ColumnRole | str],
    recipes: Mapping[str, tuple[str, str]] | None = None,
) -> Dataset:
    """Validate raw columns and wrap them as a :class:`Dataset`.

    ``NaN`` entries become masked cells.  Every column needs a role; columns
    with a ``Derived`` role need a recipe naming their two source columns.
    """
    recipes = dict(recipes or {})
    arrays: dict[str, np.ndarray] = {}
    lengths = set()
    for name, values in columns.items():
        a = np.array(values, dtype=float).ravel()
        arrays[name] = a
        lengths.add(a.size)
    if len(lengths) > 1:
        raise DatasetError(f"length mismatch: column lengths {sorted(lengths)}")
    n = lengths.pop() if lengths else 0

    parsed: dict[str, ColumnRole] = {}
    for name in arrays:
        if name not in roles:
            raise DatasetError(f"column {name!r} has no role")
        r = roles[name]
        parsed[name] = r if isinstance(r, ColumnRole) else ColumnRole.parse(r)
    extra = set(roles) - set(arrays)
    if extra:
        raise DatasetError(f"roles given for missing columns {sorted(extra)}")
    for role in SINGLETON_ROLES:
        holders = [k for k, v in parsed.items() if v is role]
        if len(holders) > 1:
            raise DatasetError(f"duplicate {role.value} role: {holders}")
    for name, role in parsed.items():
        if role is ColumnRole.DERIVED:
            if name not in recipes:
                raise DatasetError(f"derived column {name!r} needs a recipe")
            for src in recipes[name]:
                if src not in arrays:
                    raise DatasetError(f"recipe source {src!r} for {name!r} not found")

    cols: dict[str, np.ndarray] = {}
    masks: dict[str, np.ndarray] = {}
    for name, a in arrays.items():
        obs = ~np.isnan(a)
        if parsed[name] in BINARY_ROLES and not np.isin(a[obs], (0.0, 1.0)).all():
            raise DatasetError(f"non-binary indicator column {name!r}")
        a = np.where(obs, a, 0.0)
        cols[name] = _frozen(a)
        masks[name] = _frozen(obs)
    return Dataset(n, cols, parsed, masks, recipes)


def add_derived_product(ds: Dataset, a: str, b: str, out: str) -> Dataset:
    """Append ``out = a * b``, observed only where both sources are observed."""
    if out in ds.columns:
        raise DatasetError(f"column {out!r} already exists")
    for src in (a, b):
        if src not in ds.columns:
            raise DatasetError(f"unknown column {src!r}")
    obs = ds.mask[a] & ds.mask[b]
    vals = np.where(obs, ds.columns[a] * ds.columns[b], 0.0)
    cols = dict(ds.columns)
    cols[out] = _frozen(vals)
    msk = dict(ds.mask)
    msk[out] = _frozen(obs)
    roles = dict(ds.roles)
    roles[out] = ColumnRole.DERIVED
    recipes = dict(ds.recipes)
    recipes[out] = (a, b)
    return Dataset(ds.n_rows, cols, roles, msk, recipes)


def concat_trial_target(
    trial: Dataset,
    target: Dataset,
    indicator: str = "S",
    strict: bool = True,
) -> Dataset:
    """Stack trial rows over target rows and add a trial indicator.

    Treatment and outcome are taken from the trial; on target rows they are
    present but masked.  In strict mode both inputs must have the same
    covariates; otherwise a covariate absent from one side is filled as fully
    missing there.
    """
    if indicator in trial.columns or indicator in target.columns:
        raise DatasetError(f"indicator name {indicator!r} collides with an input column")
    cov_t, cov_g = trial.covariates, target.covariates
    if set(cov_t) != set(cov_g) and strict:
        raise DatasetError(
            f"covariate name mismatch: trial-only {sorted(set(cov_t) - set(cov_g))}, "
            f"target-only {sorted(set(cov_g) - set(cov_t))}"
        )
    covs = cov_t + [c for c in cov_g if c not in cov_t]
    a_name = trial.require(ColumnRole.TREATMENT)
    y_name = trial.require(ColumnRole.OUTCOME)
    n1, n0 = trial.n_rows, target.n_rows

    def stacked(name: str) -> tuple[np.ndarray, np.ndarray]:
        parts_v, parts_m = [], []
        for ds, n in ((trial, n1), (target, n0)):
            if name in ds.columns:
                parts_v.append(ds.columns[name])
                parts_m.append(ds.mask[name])
            else:
                parts_v.append(np.zeros(n))
                parts_m.append(np.zeros(n, dtype=bool))
        return np.concatenate(parts_v), np.concatenate(parts_m)

    cols, masks, roles = {}, {}, {}
    for c in covs:
        cols[c], masks[c] = stacked(c)
        roles[c] = ColumnRole.COVARIATE
    cols[indicator] = np.concatenate([np.ones(n1), np.zeros(n0)])
    masks[indicator] = np.ones(n1 + n0, dtype=bool)
    roles[indicator] = ColumnRole.TRIAL_INDICATOR
    for name, role in ((a_name, ColumnRole.TREATMENT), (y_name, ColumnRole.OUTCOME)):
        cols[name] = np.concatenate([trial.columns[name], np.zeros(n0)])
        masks[name] = np.concatenate([trial.mask[name], np.zeros(n0, dtype=bool)])
        roles[name] = role
    return Dataset(
        n1 + n0,
        {k: _frozen(v) for k, v in cols.items()},
        roles,
        {k: _frozen(v) for k, v in masks.items()},
        {},
    )


def _format(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_csv(ds: Dataset, path: str | Path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write values with masked cells as ``NA``; float text round-trips exactly."""
    extra = dict(extra or {})
    names = ds.names + list(extra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(ds.n_rows):
            row = [
                _format(ds.columns[n][i]) if ds.mask[n][i] else "NA" for n in ds.names
            ] + [_format(extra[n][i]) for n in extra]
            w.writerow(row)


def read_columns(path: str | Path) -> dict[str, np.ndarray]:
    """Read a CSV into float columns with NaN for missing cells."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise DatasetError(f"{path}: duplicate column names in header")
        data: list[list[float]] = [[] for _ in header]
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for j, cell in enumerate(row):
                cell = cell.strip()
                if cell in MISSING_TOKENS:
                    data[j].append(math.nan)
                else:
                    try:
                        data[j].append(float(cell))
                    except ValueError:
                        raise DatasetError(
                            f"{path}:{lineno}: non-numeric value {cell!r} in column {header[j]!r}"
                        ) from None
    return {h: np.array(col, dtype=float) for h, col in zip(header, data)}


def read_csv(
    path: str | Path,
    roles: Mapping[str, ColumnRole | str],
    recipes: Mapping[str, tuple[str, str]] | None = None,
) -> Dataset:
    """Load the columns named in ``roles``; other CSV columns are ignored."""
    raw = read_columns(path)
    missing = set(roles) - set(raw)
    if missing:
        raise DatasetError(f"{path}: role given for absent columns {sorted(missing)}")
    return build_dataset({n: raw[n] for n in roles}, roles, recipes)
