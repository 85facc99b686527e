"""High-level estimator running the whole pipeline behind a fit() call."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cox import CoxPropensityScorer
from .data import (
    DataError,
    Dataset,
    MissingState,
    PatientRecord,
    impute_covariates,
    standardize,
)
from .diagnostics import DicResult, compute_dic, gelman_rubin, summarize
from .likelihood import MODES, Priors, build_design, check_mode
from .sampler import SACE_PARAM, NumericalError, SamplerConfig, run_chain

__all__ = ["SaceEstimator", "DicScanResult", "dic_scan"]


def _dataset_from_frame(frame: pd.DataFrame, t_o: float) -> Dataset:
    required = ["id", "z", "t_z", "s", "t_s", "m", "y"]
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise DataError(f"data frame lacks required columns: {missing_cols}")
    cov_names = tuple(c for c in frame.columns if c not in required)
    records = []
    for _, row in frame.iterrows():
        s = int(row["s"])
        if s == 0:
            m = MissingState.UNDEFINED
            y = None
        else:
            m = MissingState(int(row["m"]))
            y = None if m is MissingState.MISSING else float(row["y"])
        records.append(
            PatientRecord(
                id=str(row["id"]),
                z=int(row["z"]),
                t_z=float(row["t_z"]),
                s=s,
                t_s=float(row["t_s"]),
                m=m,
                y=y,
                covariates=np.array([row[c] for c in cov_names], dtype=float),
            )
        )
    return Dataset(tuple(records), t_o=t_o, covariate_names=cov_names)


class SaceEstimator(BaseEstimator):
    """Survivor average causal effect via stratified mixture modeling.

    ``fit`` imputes and standardizes covariates, fits the treatment-time
    hazard model, attaches the score basis, runs the data-augmentation
    sampler, and summarizes the posterior. The effect of interest is the
    treatment coefficient of the always-survivor outcome regression,
    exposed as ``sace_mean_`` / ``sace_interval_``.

    Parameters mirror the CLI flags: ``mode`` selects the missingness model
    (``latent``, ``ignorable`` or complete-case ``mcar``), ``ps_degree`` the
    polynomial degree of the score basis, ``monotonicity`` removes the
    harmed stratum.
    """

    def __init__(
        self,
        mode: str = "latent",
        ps_degree: int = 2,
        monotonicity: bool = False,
        iterations: int = 5000,
        burn_in: int = 3000,
        thin: int = 1,
        chains: int = 1,
        seed: int = 0,
        mh_step_alpha: float = 0.2,
        mh_step_theta: float = 0.2,
        adapt: bool = True,
        standardize_covariates: str | Sequence[str] | None = "auto",
        impute: bool = True,
        x2_covariates: Sequence[str] = (),
        x3_covariates: Sequence[str] = (),
        priors: Priors | None = None,
        prior_v_scale: float = 100.0,
        prior_nu: float = 0.01,
        prior_omega: float = 0.01,
        prior_alpha_sd: float = 10.0,
        prior_theta_sd: float = 10.0,
        cox_tolerance: float = 1e-8,
        cox_max_iter: int = 50,
        allow_nonconverged_cox: bool = False,
        t_o: float = 18.0,
        n_jobs: int = 1,
    ):
        self.mode = mode
        self.ps_degree = ps_degree
        self.monotonicity = monotonicity
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.chains = chains
        self.seed = seed
        self.mh_step_alpha = mh_step_alpha
        self.mh_step_theta = mh_step_theta
        self.adapt = adapt
        self.standardize_covariates = standardize_covariates
        self.impute = impute
        self.x2_covariates = x2_covariates
        self.x3_covariates = x3_covariates
        self.priors = priors
        self.prior_v_scale = prior_v_scale
        self.prior_nu = prior_nu
        self.prior_omega = prior_omega
        self.prior_alpha_sd = prior_alpha_sd
        self.prior_theta_sd = prior_theta_sd
        self.cox_tolerance = cox_tolerance
        self.cox_max_iter = cox_max_iter
        self.allow_nonconverged_cox = allow_nonconverged_cox
        self.t_o = t_o
        self.n_jobs = n_jobs

    def _as_dataset(self, X) -> Dataset:
        if isinstance(X, Dataset):
            return X
        if isinstance(X, pd.DataFrame):
            return _dataset_from_frame(X, self.t_o)
        raise TypeError(f"expected a Dataset or DataFrame, got {type(X).__name__}")

    def _standardize_columns(self, dataset: Dataset) -> tuple[str, ...]:
        choice = self.standardize_covariates
        if choice is None or choice is False:
            return ()
        if choice == "auto":
            matrix = dataset.covariate_matrix()
            cols = []
            for j, name in enumerate(dataset.covariate_names):
                values = matrix[:, j]
                values = values[~np.isnan(values)]
                if np.unique(values).size > 2 and np.std(values, ddof=1) > 0:
                    cols.append(name)
            return tuple(cols)
        return tuple(choice)

    def fit(self, X, y=None):
        check_mode(self.mode)
        dataset = self._as_dataset(X)
        if self.impute:
            dataset, self.imputation_report_ = impute_covariates(dataset)
        else:
            self.imputation_report_ = {}
        std_cols = self._standardize_columns(dataset)
        if std_cols:
            dataset = standardize(dataset, std_cols)
        self.standardized_columns_ = std_cols
        self.dataset_ = dataset

        cols = dataset.arrays()
        scorer = CoxPropensityScorer(
            degree=self.ps_degree,
            tolerance=self.cox_tolerance,
            max_iter=self.cox_max_iter,
        ).fit(cols["X"], (cols["t_z"], cols["z"]))
        if not scorer.converged_ and not self.allow_nonconverged_cox:
            raise NumericalError(
                f"treatment-time model did not converge: {scorer.result_.message}"
            )
        self.cox_ = scorer
        self.ps_ = scorer.predict(cols["X"])

        design = build_design(
            dataset,
            self.ps_,
            degree=self.ps_degree,
            monotonicity=self.monotonicity,
            rescale_bounds=(scorer.ps_min_, scorer.ps_max_),
            x2_covariates=self.x2_covariates,
            x3_covariates=self.x3_covariates,
        )
        self.design_ = design
        if self.priors is not None:
            priors = self.priors
        else:
            priors = Priors.diffuse(
                design,
                v_scale=self.prior_v_scale,
                nu=self.prior_nu,
                omega=self.prior_omega,
                alpha_sd=self.prior_alpha_sd,
                theta_sd=self.prior_theta_sd,
            )
        self.priors_ = priors
        config = SamplerConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            seed=self.seed,
            chains=self.chains,
            mh_step_alpha=self.mh_step_alpha,
            mh_step_theta=self.mh_step_theta,
            adapt_during_burnin=self.adapt,
            mode=self.mode,
            monotonicity=self.monotonicity,
            ps_degree=self.ps_degree,
            n_jobs=self.n_jobs,
        )
        self.config_ = config
        self.samples_ = run_chain(design, config, priors)
        self.summary_ = summarize(self.samples_)
        sace_row = self.summary_[SACE_PARAM]
        self.sace_mean_ = sace_row.mean
        self.sace_interval_ = (sace_row.ci_lower, sace_row.ci_upper)
        self.acceptance_rates_ = dict(self.samples_.acceptance_rates)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "samples_"):
            raise NotFittedError("call fit first")

    def compute_dic(self, focus: str = "joint") -> DicResult:
        self._check_fitted()
        return compute_dic(self.samples_, self.design_, mode=self.mode, focus=focus)

    def gelman_rubin(self, param: str = SACE_PARAM) -> float:
        self._check_fitted()
        j = self.samples_.index_of(param)
        return gelman_rubin([chain[:, j] for chain in self.samples_.chains])


@dataclass
class DicScanResult:
    """DIC grid over missingness modes and basis degrees."""

    modes: tuple[str, ...]
    degrees: tuple[int, ...]
    table: np.ndarray  # (len(modes), len(degrees)), NaN for failed cells
    errors: dict[tuple[str, int], str]
    focus: str

    def row_minimum(self, mode: str) -> int | None:
        i = self.modes.index(mode)
        row = self.table[i]
        if np.all(np.isnan(row)):
            return None
        return int(self.degrees[int(np.nanargmin(row))])

    def global_minimum(self) -> tuple[str, int] | None:
        if np.all(np.isnan(self.table)):
            return None
        i, j = np.unravel_index(np.nanargmin(self.table), self.table.shape)
        return self.modes[int(i)], int(self.degrees[int(j)])

    def value(self, mode: str, degree: int) -> float:
        return float(
            self.table[self.modes.index(mode), self.degrees.index(degree)]
        )


def _scan_cell(dataset: Dataset, mode: str, degree: int, focus: str, kwargs: dict):
    try:
        est = SaceEstimator(mode=mode, ps_degree=degree, **kwargs).fit(dataset)
        return float(est.compute_dic(focus=focus).dic), ""
    except Exception as exc:  # failed cells are reported, not fatal
        return float("nan"), f"{type(exc).__name__}: {exc}"


def dic_scan(
    dataset: Dataset,
    modes: Sequence[str] = MODES,
    degrees: Sequence[int] = (0, 1, 2, 3, 4, 5),
    focus: str = "outcome",
    n_jobs: int = 1,
    **estimator_kwargs,
) -> DicScanResult:
    """Fit every (mode, degree) cell and collect its DIC.

    The outcome-focused deviance is the default so values stay comparable
    across modes that condition on different record sets.
    """
    modes = tuple(check_mode(m) for m in modes)
    degrees = tuple(int(d) for d in degrees)
    cells = [(m, d) for m in modes for d in degrees]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_scan_cell)(dataset, m, d, focus, estimator_kwargs) for m, d in cells
    )
    table = np.full((len(modes), len(degrees)), np.nan)
    errors: dict[tuple[str, int], str] = {}
    for (mode, degree), (value, err) in zip(cells, results):
        table[modes.index(mode), degrees.index(degree)] = value
        if err:
            errors[(mode, degree)] = err
    return DicScanResult(modes=modes, degrees=degrees, table=table, errors=errors, focus=focus)
