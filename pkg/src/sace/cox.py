"""Time-to-treatment hazard model and the propensity-score basis.

The generalized propensity score is the linear predictor of a proportional
hazards model for time to treatment, censored by death or by the outcome
horizon. Ties are handled with the Breslow approximation; the baseline hazard
is never estimated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from .data import DataError, PatientRecord

__all__ = [
    "SurvivalObservation",
    "CoxFit",
    "to_survival",
    "fit_cox",
    "fit_cox_arrays",
    "partial_loglik",
    "partial_loglik_derivatives",
    "polynomial_basis",
    "CoxPropensityScorer",
    "write_propensity_csv",
]

MAX_BASIS_DEGREE = 5

# hazard-ratio coefficients beyond this are a separation plateau in practice
_SEPARATION_BETA = 15.0


@dataclass(frozen=True)
class SurvivalObservation:
    """One subject's (possibly censored) time to treatment."""

    time: float
    event: int
    covariates: np.ndarray

    def __post_init__(self) -> None:
        if self.time <= 0:
            raise DataError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise DataError(f"event indicator must be 0 or 1, got {self.event}")
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))


@dataclass(frozen=True)
class CoxFit:
    """Newton solution of the partial likelihood."""

    beta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    message: str = ""


def to_survival(record: PatientRecord, t_o: float) -> SurvivalObservation:
    """Map a record to its treatment-time observation; t_z already encodes censoring."""
    return SurvivalObservation(time=record.t_z, event=record.z, covariates=record.covariates)


def _risk_order(times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(times, kind="stable")
    sorted_times = times[order]
    # index of the first subject sharing each time; its reverse-cumulative sums
    # give the Breslow risk set (everyone with time >= t).
    first = np.searchsorted(sorted_times, sorted_times, side="left")
    return order, first


def partial_loglik(beta: np.ndarray, times: np.ndarray, events: np.ndarray, X: np.ndarray) -> float:
    order, first = _risk_order(times)
    Xs = X[order]
    ev = events[order].astype(bool)
    lp = Xs @ beta
    c = lp.max() if lp.size else 0.0
    w = np.exp(lp - c)
    r0 = np.cumsum(w[::-1])[::-1]
    return float(np.sum(lp[ev] - c - np.log(r0[first[ev]])))


def partial_loglik_derivatives(
    beta: np.ndarray, times: np.ndarray, events: np.ndarray, X: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log partial likelihood with its analytic gradient and Hessian."""
    order, first = _risk_order(times)
    Xs = X[order]
    ev = events[order].astype(bool)
    lp = Xs @ beta
    c = lp.max() if lp.size else 0.0
    w = np.exp(lp - c)
    r0 = np.cumsum(w[::-1])[::-1]
    r1 = np.cumsum((w[:, None] * Xs)[::-1], axis=0)[::-1]
    outer = w[:, None, None] * (Xs[:, :, None] * Xs[:, None, :])
    r2 = np.cumsum(outer[::-1], axis=0)[::-1]
    idx = first[ev]
    xbar = r1[idx] / r0[idx, None]
    loglik = float(np.sum(lp[ev] - c - np.log(r0[idx])))
    grad = np.sum(Xs[ev] - xbar, axis=0)
    hess = -(
        np.sum(r2[idx] / r0[idx, None, None], axis=0) - xbar.T @ xbar
    )
    return loglik, grad, hess


def fit_cox_arrays(
    times: np.ndarray,
    events: np.ndarray,
    X: np.ndarray,
    tolerance: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 30,
) -> CoxFit:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != times.shape[0] or events.shape[0] != times.shape[0]:
        raise DataError("times, events and covariates must have matching lengths")
    if events.sum() < 1:
        raise DataError("need at least one treatment event to fit the hazard model")

    def finish(beta, loglik, iterations):
        # a vanishing gradient at an absurd coefficient is the plateau of a
        # monotone likelihood, not a genuine maximum
        if np.max(np.abs(beta)) > _SEPARATION_BETA:
            return CoxFit(
                beta,
                loglik,
                iterations,
                False,
                "coefficients diverged; monotone likelihood (separation) suspected",
            )
        return CoxFit(beta, loglik, iterations, True)

    beta = np.zeros(X.shape[1])
    loglik, grad, hess = partial_loglik_derivatives(beta, times, events, X)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tolerance:
            return finish(beta, loglik, it - 1)
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise DataError(
                "singular information matrix: covariates are collinear on the events"
            ) from None
        step = 1.0
        for _ in range(max_halvings):
            cand = beta + step * delta
            cand_ll = partial_loglik(cand, times, events, X)
            if cand_ll >= loglik - 1e-12:
                break
            step *= 0.5
        else:
            return CoxFit(
                beta, loglik, it, False, "step-halving failed to improve the likelihood"
            )
        beta = beta + step * delta
        loglik, grad, hess = partial_loglik_derivatives(beta, times, events, X)
    if np.max(np.abs(grad)) < tolerance:
        return finish(beta, loglik, max_iter)
    message = "maximum iterations reached"
    if np.max(np.abs(beta)) > _SEPARATION_BETA:
        message += "; diverging coefficients suggest a monotone likelihood (separation)"
    return CoxFit(beta, loglik, max_iter, False, message)


def fit_cox(
    observations: Sequence[SurvivalObservation],
    tolerance: float = 1e-8,
    max_iter: int = 50,
) -> CoxFit:
    """Maximize the Breslow-tie log partial likelihood by damped Newton steps."""
    if not observations:
        raise DataError("no observations")
    times = np.array([o.time for o in observations])
    events = np.array([o.event for o in observations])
    X = np.vstack([o.covariates for o in observations])
    return fit_cox_arrays(times, events, X, tolerance=tolerance, max_iter=max_iter)


def linear_predictor(fit: CoxFit, record: PatientRecord) -> float:
    """The generalized propensity score beta . D for one record."""
    if record.covariates.shape != fit.beta.shape:
        raise DataError(
            f"record {record.id!r}: {record.covariates.shape[0]} covariates but "
            f"the fit has {fit.beta.shape[0]} coefficients"
        )
    return float(fit.beta @ record.covariates)


def polynomial_basis(ps: float | np.ndarray, degree: int) -> np.ndarray:
    """Powers (ps, ps^2, ..., ps^degree); empty for degree 0 (score excluded)."""
    if degree < 0:
        raise ValueError(f"degree must be non-negative, got {degree}")
    if degree > MAX_BASIS_DEGREE:
        raise ValueError(f"degree must be at most {MAX_BASIS_DEGREE}, got {degree}")
    arr = np.atleast_1d(np.asarray(ps, dtype=float))
    basis = np.power.outer(arr, np.arange(1, degree + 1))
    if np.isscalar(ps) or np.asarray(ps).ndim == 0:
        return basis[0]
    return basis


def rescale_scores(ps: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affine map sending [lo, hi] to [-1, 1] for numeric conditioning."""
    if hi <= lo:
        return np.zeros_like(np.asarray(ps, dtype=float))
    return (2.0 * (np.asarray(ps, dtype=float) - lo) / (hi - lo)) - 1.0


class CoxPropensityScorer(BaseEstimator, TransformerMixin):
    """Treatment-time hazard model exposing scores and their polynomial basis.

    Parameters
    ----------
    degree : int
        Degree of the polynomial basis returned by ``transform`` (0 drops the
        score entirely).
    tolerance, max_iter : float, int
        Newton stopping rule on the gradient max-norm.

    After ``fit``, ``predict`` returns the raw linear predictor and
    ``transform`` the degree-d basis of the score rescaled to [-1, 1] over the
    fitting sample.
    """

    def __init__(self, degree: int = 2, tolerance: float = 1e-8, max_iter: int = 50):
        self.degree = degree
        self.tolerance = tolerance
        self.max_iter = max_iter

    def fit(self, X, y):
        """Fit on covariates ``X`` and ``y = (times, events)`` (or an (n, 2) array)."""
        X = check_array(X, ensure_min_features=1)
        times, events = self._split_target(y, X.shape[0])
        fit = fit_cox_arrays(
            times, events, X, tolerance=self.tolerance, max_iter=self.max_iter
        )
        self.result_ = fit
        self.coef_ = fit.beta
        self.loglik_ = fit.loglik
        self.n_iter_ = fit.iterations
        self.converged_ = fit.converged
        scores = X @ fit.beta
        self.ps_min_ = float(scores.min())
        self.ps_max_ = float(scores.max())
        return self

    @staticmethod
    def _split_target(y, n: int) -> tuple[np.ndarray, np.ndarray]:
        if isinstance(y, tuple) and len(y) == 2:
            times, events = y
        else:
            arr = np.asarray(y, dtype=float)
            if arr.ndim != 2 or arr.shape != (n, 2):
                raise DataError("y must be (times, events) or an (n, 2) array")
            times, events = arr[:, 0], arr[:, 1]
        return np.asarray(times, dtype=float), np.asarray(events).astype(int)

    def _check_fitted(self) -> None:
        if not hasattr(self, "coef_"):
            raise NotFittedError("CoxPropensityScorer must be fitted first")

    def predict(self, X) -> np.ndarray:
        """Raw linear predictor (the generalized propensity score)."""
        self._check_fitted()
        X = check_array(X)
        if X.shape[1] != self.coef_.shape[0]:
            raise DataError(
                f"expected {self.coef_.shape[0]} covariates, got {X.shape[1]}"
            )
        return X @ self.coef_

    def transform(self, X) -> np.ndarray:
        """Degree-d polynomial basis of the rescaled score; shape (n, degree)."""
        scores = self.predict(X)
        rescaled = rescale_scores(scores, self.ps_min_, self.ps_max_)
        return polynomial_basis(rescaled, self.degree)

    def basis_of_scores(self, scores: np.ndarray) -> np.ndarray:
        """Basis for precomputed scores, using the fit-sample rescaling."""
        self._check_fitted()
        rescaled = rescale_scores(np.asarray(scores, dtype=float), self.ps_min_, self.ps_max_)
        return polynomial_basis(rescaled, self.degree)


def write_propensity_csv(path: str | Path, ids: Sequence[str], scores: np.ndarray) -> None:
    """Audit export of (id, ps) pairs."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "ps"])
        for rid, ps in zip(ids, scores):
            writer.writerow([rid, repr(float(ps))])
