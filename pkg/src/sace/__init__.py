"""Survivor average causal effect estimation under censoring by death and
missing outcomes: generalized propensity scores, principal-stratification
mixtures, and a data-augmentation sampler, with a simulator for validation."""

__version__ = "0.1.0"

from .data import (
    DataError,
    Dataset,
    MissingState,
    ObservedGroup,
    PatientRecord,
    PrincipalStratum,
    classify_observed_group,
    feasible_strata,
    impute_covariates,
    inverse_standardize,
    load_csv,
    standardize,
    write_csv,
)
from .cox import (
    CoxFit,
    CoxPropensityScorer,
    SurvivalObservation,
    fit_cox,
    linear_predictor,
    polynomial_basis,
    to_survival,
)
from .likelihood import (
    ModelDesign,
    ModelParams,
    MissingnessParams,
    OutcomeParams,
    Priors,
    StrataParams,
    build_design,
    complete_data_logcontribution,
    missing_prob,
    observed_data_loglik,
    outcome_conditional_loglik,
    outcome_logdensity,
    strata_probs,
)
from .sampler import (
    ChainState,
    NumericalError,
    PosteriorSamples,
    SACE_PARAM,
    SamplerConfig,
    i_step,
    i_step_probabilities,
    p_step_missing,
    p_step_outcome,
    p_step_strata,
    read_draws_csv,
    run_chain,
    write_draws_csv,
)
from .diagnostics import (
    DicResult,
    PosteriorSummary,
    compute_dic,
    effective_sample_size,
    gelman_rubin,
    summarize,
)
from .simulate import (
    SimConfig,
    SimTruth,
    confounded_config,
    low_dl_config,
    naive_survivor_difference,
    read_truth_manifest,
    reference_config,
    simulate,
    write_truth_manifest,
)
from .estimator import DicScanResult, SaceEstimator, dic_scan

__all__ = [
    "__version__",
    "DataError",
    "Dataset",
    "MissingState",
    "ObservedGroup",
    "PatientRecord",
    "PrincipalStratum",
    "classify_observed_group",
    "feasible_strata",
    "impute_covariates",
    "inverse_standardize",
    "load_csv",
    "standardize",
    "write_csv",
    "CoxFit",
    "CoxPropensityScorer",
    "SurvivalObservation",
    "fit_cox",
    "linear_predictor",
    "polynomial_basis",
    "to_survival",
    "ModelDesign",
    "ModelParams",
    "MissingnessParams",
    "OutcomeParams",
    "Priors",
    "StrataParams",
    "build_design",
    "complete_data_logcontribution",
    "missing_prob",
    "observed_data_loglik",
    "outcome_conditional_loglik",
    "outcome_logdensity",
    "strata_probs",
    "ChainState",
    "NumericalError",
    "PosteriorSamples",
    "SACE_PARAM",
    "SamplerConfig",
    "i_step",
    "i_step_probabilities",
    "p_step_missing",
    "p_step_outcome",
    "p_step_strata",
    "read_draws_csv",
    "run_chain",
    "write_draws_csv",
    "DicResult",
    "PosteriorSummary",
    "compute_dic",
    "effective_sample_size",
    "gelman_rubin",
    "summarize",
    "SimConfig",
    "SimTruth",
    "confounded_config",
    "low_dl_config",
    "naive_survivor_difference",
    "read_truth_manifest",
    "reference_config",
    "simulate",
    "write_truth_manifest",
    "DicScanResult",
    "SaceEstimator",
    "dic_scan",
]
