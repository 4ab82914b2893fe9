"""Sequence-of-trials emulation for longitudinal observational data.

Workflow: load person-period records, fit censoring/switching weight
models on the original data, expand into per-trial rows with inverse
probability weights, optionally case-control sample, fit a weighted
pooled logistic outcome model with cluster-robust variance, and predict
marginal cumulative incidence effects with simulation-based intervals.
"""
from ._version import __version__
from .data_model import (
    ColumnMap,
    LongitudinalDataset,
    ValidationReport,
    from_frame,
    load_longitudinal_csv,
    validate_dataset,
)
from .design import (
    DesignInfo,
    ModelFormula,
    SplineBasisSpec,
    TermSpec,
    build_design_matrix,
    natural_spline_basis,
    parse_formula,
    parse_terms,
    spline_spec_from_data,
)
from .expansion import (
    CsvTrialSink,
    Estimand,
    ExpansionOptions,
    derive_time_on_regime,
    expand,
    expand_chunked,
    read_trial_files,
    sort_trial_files,
)
from .glm import (
    GlmFit,
    SandwichCovariance,
    cluster_sandwich_covariance,
    coefficient_table,
    fit_weighted_logistic,
    predict_probability,
)
from .msm import MsmFit, MsmSpec, fit_msm, summarize_msm
from .pipeline import PredictionConfig, RunConfig, RunRecord, run_pipeline
from .predict import (
    MarginalPrediction,
    conditional_cum_inc,
    marginal_curves,
    marginal_effect,
    sample_coefficients,
    trial_baselines,
)
from .sampling import SamplingOptions, case_control_sample, keyed_uniform
from .simulate import SimConfig, simulate_dataset, simulated_column_map, write_simulated_csv
from .weights import (
    TruncationPolicy,
    WeightModelSet,
    WeightSpec,
    attach_weights,
    compute_period_ratios,
    fit_censoring_models,
    fit_switch_models,
    fit_weight_models,
    mean_stabilized_switch_weight,
    truncate_weights,
)

__all__ = [
    "__version__",
    "ColumnMap",
    "LongitudinalDataset",
    "ValidationReport",
    "from_frame",
    "load_longitudinal_csv",
    "validate_dataset",
    "DesignInfo",
    "ModelFormula",
    "SplineBasisSpec",
    "TermSpec",
    "build_design_matrix",
    "natural_spline_basis",
    "parse_formula",
    "parse_terms",
    "spline_spec_from_data",
    "CsvTrialSink",
    "Estimand",
    "ExpansionOptions",
    "derive_time_on_regime",
    "expand",
    "expand_chunked",
    "read_trial_files",
    "sort_trial_files",
    "GlmFit",
    "SandwichCovariance",
    "cluster_sandwich_covariance",
    "coefficient_table",
    "fit_weighted_logistic",
    "predict_probability",
    "MsmFit",
    "MsmSpec",
    "fit_msm",
    "summarize_msm",
    "PredictionConfig",
    "RunConfig",
    "RunRecord",
    "run_pipeline",
    "MarginalPrediction",
    "conditional_cum_inc",
    "marginal_curves",
    "marginal_effect",
    "sample_coefficients",
    "trial_baselines",
    "SamplingOptions",
    "case_control_sample",
    "keyed_uniform",
    "SimConfig",
    "simulate_dataset",
    "simulated_column_map",
    "write_simulated_csv",
    "TruncationPolicy",
    "WeightModelSet",
    "WeightSpec",
    "attach_weights",
    "compute_period_ratios",
    "fit_censoring_models",
    "fit_switch_models",
    "fit_weight_models",
    "mean_stabilized_switch_weight",
    "truncate_weights",
]
