"""Superpopulation generator: three covariates, logistic trial selection,
randomized treatment in the trial, and linear potential outcomes with effect
modification.

Treatment effects are always treated-minus-control, ``Y1 - Y0``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.special import expit

from ipsw_mi.tabular import ColumnRole, Dataset, build_dataset

COVARIATES = ("X1", "X2", "X3")
MAX_RETRIES = 100


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_target: int = 10_000
    alpha: tuple[float, float, float, float] = (-4.10, 1.0, 1.0, 1.0)
    beta1: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    beta0: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)
    noise_sd: float = 1.0
    treat_prob: float = 0.5
    seed: int = 20210101

    def __post_init__(self) -> None:
        if not isinstance(self.n_target, (int, np.integer)) or isinstance(self.n_target, bool) or self.n_target < 1:
            raise ConfigError(f"n_target: expected a positive integer, got {self.n_target!r}")
        for name in ("alpha", "beta1", "beta0"):
            v = getattr(self, name)
            try:
                v = tuple(float(x) for x in v)
            except (TypeError, ValueError):
                raise ConfigError(f"{name}: expected 4 numbers, got {v!r}") from None
            if len(v) != 4 or not all(np.isfinite(v)):
                raise ConfigError(f"{name}: expected 4 finite numbers, got {v!r}")
            object.__setattr__(self, name, v)
        try:
            noise = float(self.noise_sd)
            tp = float(self.treat_prob)
        except (TypeError, ValueError):
            raise ConfigError("noise_sd/treat_prob: expected numbers") from None
        if not noise >= 0:
            raise ConfigError(f"noise_sd: must be non-negative, got {self.noise_sd!r}")
        if not 0.0 < tp <= 1.0:
            raise ConfigError(f"treat_prob: must lie in (0, 1], got {self.treat_prob!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed: expected a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "noise_sd", noise)
        object.__setattr__(self, "treat_prob", tp)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("scenario: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown scenario field")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k in ("alpha", "beta1", "beta0"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"<json>: malformed JSON at line {e.lineno}: {e.msg}") from None
        return cls.from_dict(d)


@dataclass(frozen=True)
class Superpopulation:
    """Generated target population.

    ``data`` holds what an analyst would see (X1-X3, S, A, Y); the potential
    outcomes ``y1``/``y0`` are kept apart so estimators never touch them.
    """

    data: Dataset
    y1: np.ndarray = field(repr=False)
    y0: np.ndarray = field(repr=False)
    true_pate_s0: float
    true_pate_all: float
    realized_tate: float
    attempts: int = 1

    def estimands(self) -> dict[str, float]:
        return {
            "true_pate_s0": self.true_pate_s0,
            "true_pate_all": self.true_pate_all,
            "realized_tate": self.realized_tate,
            "n_target": self.data.n_rows,
            "n_trial": int(self.data["S"].sum()),
        }


def gen_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 3) i.i.d. standard normal covariates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal((n, 3))


def selection_prob(X: np.ndarray, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return expit(alpha[0] + X @ alpha[1:])


def gen_trial_indicator(X: np.ndarray, alpha, rng: np.random.Generator) -> np.ndarray:
    if len(alpha) != 4:
        raise ValueError("alpha must have length 4")
    p = selection_prob(X, alpha)
    return (rng.random(X.shape[0]) < p).astype(float)


def gen_treatment(S: np.ndarray, treat_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(treat_prob) on trial rows, NaN (missing) elsewhere."""
    A = np.full(S.shape[0], np.nan)
    trial = S == 1
    A[trial] = (rng.random(int(trial.sum())) < treat_prob).astype(float)
    return A


def gen_potential_outcomes(
    X: np.ndarray, beta1, beta0, noise_sd: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    b1 = np.asarray(beta1, dtype=float)
    b0 = np.asarray(beta0, dtype=float)
    if b1.size != 4 or b0.size != 4:
        raise ValueError("outcome coefficients must have length 4")
    n = X.shape[0]
    e1 = rng.normal(0.0, noise_sd, n) if noise_sd > 0 else np.zeros(n)
    e0 = rng.normal(0.0, noise_sd, n) if noise_sd > 0 else np.zeros(n)
    y1 = b1[0] + X @ b1[1:] + e1
    y0 = b0[0] + X @ b0[1:] + e0
    return y1, y0


def _degenerate(S: np.ndarray, A: np.ndarray) -> str | None:
    n1 = int(S.sum())
    if n1 == S.size:
        return "empty S=0 stratum"
    if n1 < 2:
        return "fewer than 2 trial rows"
    arms = A[S == 1]
    if arms.min() == arms.max():
        return "single-arm trial"
    return None


def make_superpopulation(cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> Superpopulation:
    """Draw one superpopulation; redraws degenerate trials up to 100 times.

    Without ``rng`` the stream is seeded from ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    reason = None
    for attempt in range(1, MAX_RETRIES + 1):
        X = gen_covariates(cfg.n_target, rng)
        S = gen_trial_indicator(X, cfg.alpha, rng)
        A = gen_treatment(S, cfg.treat_prob, rng)
        y1, y0 = gen_potential_outcomes(X, cfg.beta1, cfg.beta0, cfg.noise_sd, rng)
        reason = _degenerate(S, np.nan_to_num(A, nan=0.0))
        if reason is None:
            break
    else:
        raise GenerationError(f"{reason} after {MAX_RETRIES} attempts")

    trial = S == 1
    Af = np.nan_to_num(A, nan=0.0)
    Y = np.where(trial, (1.0 - Af) * y0 + Af * y1, np.nan)
    ds = build_dataset(
        {"X1": X[:, 0], "X2": X[:, 1], "X3": X[:, 2], "S": S, "A": A, "Y": Y},
        {
            "X1": ColumnRole.COVARIATE,
            "X2": ColumnRole.COVARIATE,
            "X3": ColumnRole.COVARIATE,
            "S": ColumnRole.TRIAL_INDICATOR,
            "A": ColumnRole.TREATMENT,
            "Y": ColumnRole.OUTCOME,
        },
    )
    effect = y1 - y0
    treated = trial & (Af == 1)
    control = trial & (Af == 0)
    y1.setflags(write=False)
    y0.setflags(write=False)
    return Superpopulation(
        data=ds,
        y1=y1,
        y0=y0,
        true_pate_s0=float(effect[~trial].mean()),
        true_pate_all=float(effect.mean()),
        realized_tate=float(Y[treated].mean() - Y[control].mean()),
        attempts=attempt,
    )
