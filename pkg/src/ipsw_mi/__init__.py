"""Inverse probability of sampling weighting with multiple imputation.

Generalize or transport randomized-trial effects to a target population when
effect modifiers are partially observed, and run the Monte Carlo study that
compares imputation models for that setting.
"""

from ipsw_mi.tabular import ColumnRole, Dataset, build_dataset, concat_trial_target
from ipsw_mi.datagen import ScenarioConfig, Superpopulation, make_superpopulation
from ipsw_mi.missingness import MarSpec, induce_mar
from ipsw_mi.mice import ImputationSpec, ImputedSet, build_spec, impute
from ipsw_mi.ipsw import (
    EstimateResult,
    PooledEstimate,
    WeightScheme,
    complete_case,
    estimate_pate,
    psi_within,
)
from ipsw_mi.study import StudyConfig, StudyResult, performance_metrics, run_study

__version__ = "0.1.0"

__all__ = [
    "ColumnRole",
    "Dataset",
    "EstimateResult",
    "ImputationSpec",
    "ImputedSet",
    "MarSpec",
    "PooledEstimate",
    "ScenarioConfig",
    "StudyConfig",
    "StudyResult",
    "Superpopulation",
    "WeightScheme",
    "build_dataset",
    "build_spec",
    "complete_case",
    "concat_trial_target",
    "estimate_pate",
    "impute",
    "induce_mar",
    "make_superpopulation",
    "performance_metrics",
    "psi_within",
    "run_study",
]
