"""Synthetic cohorts, the reconstruction pipeline, experiment runners and reports."""
from .checks import CheckResult, run_checks
from .cohort import CohortMember, load_cohort, save_cohort
from .pipeline import ModelBundle, TestCase, build_model, bundle_from_model, predict, prepare_test_case, reconstruct
from .report import emit_report, report_rows
from .runners import ExperimentSpec, Study, TrialResult, run_experiment
from .synthetic import FemurDistribution, SyntheticFemurParams, generate_femur, generate_synthetic_cohort

__all__ = [
    "CheckResult",
    "CohortMember",
    "ExperimentSpec",
    "FemurDistribution",
    "ModelBundle",
    "Study",
    "SyntheticFemurParams",
    "TestCase",
    "TrialResult",
    "build_model",
    "bundle_from_model",
    "emit_report",
    "generate_femur",
    "generate_synthetic_cohort",
    "load_cohort",
    "predict",
    "prepare_test_case",
    "reconstruct",
    "report_rows",
    "run_checks",
    "run_experiment",
    "save_cohort",
]
