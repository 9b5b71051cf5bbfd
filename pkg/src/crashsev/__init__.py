"""Mixed logit injury-severity models estimated by simulated maximum likelihood."""
from .data import (LEVELS, ChoiceObservation, CrashRecord, Dataset, Schema, SchemaError,
                   consolidate_severity, derive_indicators, parse_records, stratify, summarize)
from .estimation import (EstimationOptions, EstimationResult, compute_covariance, estimate,
                         pseudo_r2, wald_stats)
from .halton import DrawMatrix, build_draws, radical_inverse, standard_normal_quantile
from .inference import (LRTestResult, MarginalEffectsTable, chi_square_sf, lr_pooled_test,
                        lr_transferability, marginal_effects, share_below_zero)
from .likelihood import (SimulatedLikelihood, log_likelihood, mnl_probabilities,
                         null_log_likelihood, score, simulated_probabilities)
from .modelspec import ModelSpec, ParameterDef, SpecError, parameter_layout, validate_spec
from .report import ComparisonMatrix, render_comparison, render_estimation_table
from .synthetic import CovariateLaw, GenConfig, brute_force_mixed_prob, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "LEVELS", "ChoiceObservation", "CrashRecord", "Dataset", "Schema", "SchemaError",
    "consolidate_severity", "derive_indicators", "parse_records", "stratify", "summarize",
    "EstimationOptions", "EstimationResult", "compute_covariance", "estimate", "pseudo_r2", "wald_stats",
    "DrawMatrix", "build_draws", "radical_inverse", "standard_normal_quantile",
    "LRTestResult", "MarginalEffectsTable", "chi_square_sf", "lr_pooled_test", "lr_transferability",
    "marginal_effects", "share_below_zero",
    "SimulatedLikelihood", "log_likelihood", "mnl_probabilities", "null_log_likelihood", "score",
    "simulated_probabilities",
    "ModelSpec", "ParameterDef", "SpecError", "parameter_layout", "validate_spec",
    "ComparisonMatrix", "render_comparison", "render_estimation_table",
    "CovariateLaw", "GenConfig", "brute_force_mixed_prob", "generate_dataset",
]
