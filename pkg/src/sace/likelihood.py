"""Parametric model components and likelihood evaluation.

Three components: a multinomial-logit model for the latent stratum, normal
outcome regressions per stratum, and per-(stratum, arm) logistic missingness
models. Complete-data cells combine them per observed group; the observed-data
log-likelihood marginalizes each record over its feasible strata.

Modes: ``latent`` keeps the missingness factors, ``ignorable`` drops them,
``mcar`` additionally drops survivors with missing outcomes (complete-case).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .cox import polynomial_basis, rescale_scores
from .data import (
    DataError,
    Dataset,
    ObservedGroup,
    PrincipalStratum,
    classify_observed_group,
    feasible_strata,
)

__all__ = [
    "MODES",
    "REFERENCE_STRATUM",
    "MISSING_BLOCKS",
    "active_strata",
    "outcome_strata",
    "missing_blocks",
    "StrataParams",
    "OutcomeParams",
    "MissingnessParams",
    "ModelParams",
    "Priors",
    "ModelDesign",
    "build_design",
    "strata_probs",
    "missing_prob",
    "outcome_logdensity",
    "complete_data_logcontribution",
    "log_cell_matrix",
    "observed_data_loglik",
    "outcome_conditional_loglik",
    "stratum_posteriors",
]

MODES = ("latent", "ignorable", "mcar")

GROUP_ORDER = (
    ObservedGroup.O110,
    ObservedGroup.O111,
    ObservedGroup.O10x,
    ObservedGroup.O010,
    ObservedGroup.O011,
    ObservedGroup.O00x,
)

STRATA_ORDER = (
    PrincipalStratum.LL,
    PrincipalStratum.LD,
    PrincipalStratum.DL,
    PrincipalStratum.DD,
)

# DD never survives, hence never has an outcome model; it also always exists,
# which makes it the natural multinomial reference under either monotonicity
# setting.
REFERENCE_STRATUM = PrincipalStratum.DD

# (stratum, arm) pairs that can produce an observed survivor, the only
# combinations for which a missingness probability is defined.
MISSING_BLOCKS = (
    (PrincipalStratum.LL, 1),
    (PrincipalStratum.LL, 0),
    (PrincipalStratum.LD, 1),
    (PrincipalStratum.DL, 0),
)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def active_strata(monotonicity: bool = False) -> tuple[PrincipalStratum, ...]:
    if monotonicity:
        return tuple(g for g in STRATA_ORDER if g is not PrincipalStratum.DL)
    return STRATA_ORDER


def outcome_strata(monotonicity: bool = False) -> tuple[PrincipalStratum, ...]:
    return tuple(g for g in active_strata(monotonicity) if g is not REFERENCE_STRATUM)


def missing_blocks(monotonicity: bool = False) -> tuple[tuple[PrincipalStratum, int], ...]:
    if monotonicity:
        return tuple(b for b in MISSING_BLOCKS if b[0] is not PrincipalStratum.DL)
    return MISSING_BLOCKS


def _log_expit(u: np.ndarray) -> np.ndarray:
    # log sigmoid, stable for |u| up to the exp overflow range
    return -np.logaddexp(0.0, -u)


@dataclass
class StrataParams:
    """Multinomial-logit coefficients per non-reference stratum (reference fixed at 0)."""

    alpha: dict[PrincipalStratum, np.ndarray]

    def __post_init__(self) -> None:
        self.alpha = {g: np.asarray(v, dtype=float) for g, v in self.alpha.items()}
        if REFERENCE_STRATUM in self.alpha:
            raise ValueError("the reference stratum has no free coefficients")
        dims = {v.shape for v in self.alpha.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent alpha dimensions: {dims}")


@dataclass
class OutcomeParams:
    """Normal regression (eta, sigma2) per survivable stratum."""

    eta: dict[PrincipalStratum, np.ndarray]
    sigma2: dict[PrincipalStratum, float]

    def __post_init__(self) -> None:
        self.eta = {g: np.asarray(v, dtype=float) for g, v in self.eta.items()}
        for g, s2 in self.sigma2.items():
            if not s2 > 0:
                raise ValueError(f"sigma2[{g.value}] must be positive, got {s2}")
        if PrincipalStratum.DD in self.eta:
            raise ValueError("the never-survivor stratum has no outcome model")


@dataclass
class MissingnessParams:
    """Logistic coefficients per (stratum, arm) block with possible survivors."""

    theta: dict[tuple[PrincipalStratum, int], np.ndarray]

    def __post_init__(self) -> None:
        self.theta = {k: np.asarray(v, dtype=float) for k, v in self.theta.items()}
        for key in self.theta:
            if key not in MISSING_BLOCKS:
                raise ValueError(f"no survivors exist for block {key}")


@dataclass
class ModelParams:
    """Everything the sampler draws; missingness is absent outside latent mode."""

    strata: StrataParams
    outcome: OutcomeParams
    missingness: MissingnessParams | None = None

    def require_for_mode(self, mode: str) -> None:
        check_mode(mode)
        if mode == "latent" and self.missingness is None:
            raise ValueError("latent mode requires missingness parameters")


@dataclass
class Priors:
    """Conjugate normal-inverse-gamma priors per outcome stratum, diffuse
    normals for the logit blocks."""

    mu: dict[PrincipalStratum, np.ndarray]
    v: dict[PrincipalStratum, np.ndarray]
    nu: dict[PrincipalStratum, float]
    omega: dict[PrincipalStratum, float]
    alpha_sd: float = 10.0
    theta_sd: float = 10.0

    def __post_init__(self) -> None:
        self.mu = {g: np.asarray(m, dtype=float) for g, m in self.mu.items()}
        self.v = {g: np.asarray(m, dtype=float) for g, m in self.v.items()}
        for g, mat in self.v.items():
            if mat.shape != (self.mu[g].size, self.mu[g].size):
                raise ValueError(f"V[{g.value}] shape does not match mu")
            try:
                np.linalg.cholesky(mat)
            except np.linalg.LinAlgError:
                raise ValueError(f"V[{g.value}] must be positive definite") from None
        for g in self.nu:
            if not (self.nu[g] > 0 and self.omega[g] > 0):
                raise ValueError(f"nu and omega must be positive for {g.value}")
        if not (self.alpha_sd > 0 and self.theta_sd > 0):
            raise ValueError("prior sds must be positive")

    @classmethod
    def diffuse(
        cls,
        design: "ModelDesign",
        v_scale: float = 100.0,
        nu: float = 0.01,
        omega: float = 0.01,
        alpha_sd: float = 10.0,
        theta_sd: float = 10.0,
    ) -> "Priors":
        mu, v, nus, omegas = {}, {}, {}, {}
        for g in outcome_strata(design.monotonicity):
            p = design.x1_dim(g)
            mu[g] = np.zeros(p)
            v[g] = v_scale * np.eye(p)
            nus[g] = nu
            omegas[g] = omega
        return cls(mu, v, nus, omegas, alpha_sd=alpha_sd, theta_sd=theta_sd)


@dataclass
class ModelDesign:
    """Aligned design matrices and index structures for one dataset.

    ``x1_ll`` applies to the always-survivor stratum (intercept, z, scaled
    treatment time, score basis); ``x1_other`` to the single-arm survivor
    strata (intercept, score basis). ``x2``/``x3`` drive the stratum and
    missingness models.
    """

    x1_ll: np.ndarray
    x1_other: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    m: np.ndarray  # 0 observed, 1 missing, -1 undefined
    group_codes: np.ndarray
    monotonicity: bool
    ids: tuple[str, ...]
    x1_ll_columns: tuple[str, ...]
    x1_other_columns: tuple[str, ...]
    x2_columns: tuple[str, ...]
    x3_columns: tuple[str, ...]
    t_z_scale: tuple[float, float]
    ps: np.ndarray

    def __post_init__(self) -> None:
        self.strata = active_strata(self.monotonicity)
        self.stratum_col = {g: j for j, g in enumerate(self.strata)}
        self.group_rows = {
            group: np.flatnonzero(self.group_codes == code)
            for code, group in enumerate(GROUP_ORDER)
        }
        self.survivor_rows = {
            arm: np.flatnonzero((self.s == 1) & (self.z == arm)) for arm in (0, 1)
        }
        self.observed_outcome_mask = (self.s == 1) & (self.m == 0)
        obs = self.observed_outcome_mask
        self.outcome_rows = {
            PrincipalStratum.LL: np.flatnonzero(obs),
            PrincipalStratum.LD: np.flatnonzero(obs & (self.z == 1)),
            PrincipalStratum.DL: np.flatnonzero(obs & (self.z == 0)),
        }
        self.feasible_cols = {
            group: tuple(
                self.stratum_col[g] for g in feasible_strata(group, self.monotonicity)
            )
            for group in GROUP_ORDER
        }

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def x1_dim(self, g: PrincipalStratum) -> int:
        return (
            self.x1_ll.shape[1] if g is PrincipalStratum.LL else self.x1_other.shape[1]
        )

    def x1_for(self, g: PrincipalStratum) -> np.ndarray:
        return self.x1_ll if g is PrincipalStratum.LL else self.x1_other

    def x1_columns_for(self, g: PrincipalStratum) -> tuple[str, ...]:
        return (
            self.x1_ll_columns if g is PrincipalStratum.LL else self.x1_other_columns
        )

    def included_mask(self, mode: str) -> np.ndarray:
        """Records entering the likelihood: mcar drops missing-outcome survivors."""
        check_mode(mode)
        if mode == "mcar":
            return ~((self.s == 1) & (self.m == 1))
        return np.ones(self.n, dtype=bool)

    def subset(self, mask: np.ndarray) -> "ModelDesign":
        idx = np.flatnonzero(mask)
        return ModelDesign(
            x1_ll=self.x1_ll[idx],
            x1_other=self.x1_other[idx],
            x2=self.x2[idx],
            x3=self.x3[idx],
            y=self.y[idx],
            z=self.z[idx],
            s=self.s[idx],
            m=self.m[idx],
            group_codes=self.group_codes[idx],
            monotonicity=self.monotonicity,
            ids=tuple(self.ids[i] for i in idx),
            x1_ll_columns=self.x1_ll_columns,
            x1_other_columns=self.x1_other_columns,
            x2_columns=self.x2_columns,
            x3_columns=self.x3_columns,
            t_z_scale=self.t_z_scale,
            ps=self.ps[idx],
        )

    def complete_cases(self) -> "ModelDesign":
        return self.subset(self.included_mask("mcar"))

    def row(self, i: int) -> "DesignRow":
        return DesignRow(
            group=GROUP_ORDER[self.group_codes[i]],
            z=int(self.z[i]),
            s=int(self.s[i]),
            m=int(self.m[i]),
            y=float(self.y[i]) if np.isfinite(self.y[i]) else None,
            x1_ll=self.x1_ll[i],
            x1_other=self.x1_other[i],
            x2=self.x2[i],
            x3=self.x3[i],
        )


@dataclass(frozen=True)
class DesignRow:
    """Per-record view used by the scalar likelihood API."""

    group: ObservedGroup
    z: int
    s: int
    m: int
    y: float | None
    x1_ll: np.ndarray
    x1_other: np.ndarray
    x2: np.ndarray
    x3: np.ndarray

    def x1_for(self, g: PrincipalStratum) -> np.ndarray:
        return self.x1_ll if g is PrincipalStratum.LL else self.x1_other


def build_design(
    dataset: Dataset,
    ps: np.ndarray,
    degree: int,
    monotonicity: bool = False,
    rescale_bounds: tuple[float, float] | None = None,
    x2_covariates: Sequence[str] = (),
    x3_covariates: Sequence[str] = (),
) -> ModelDesign:
    """Assemble model matrices from a dataset and its propensity scores.

    The score is affinely rescaled to [-1, 1] (bounds default to the sample
    range) before powering; treatment time is standardized in the
    always-survivor outcome matrix and the scale recorded.
    """
    ps = np.asarray(ps, dtype=float)
    if ps.shape != (dataset.n,):
        raise DataError("propensity scores must align with the records")
    cols = dataset.arrays()
    if rescale_bounds is None:
        rescale_bounds = (float(ps.min()), float(ps.max())) if ps.size else (0.0, 1.0)
    basis = polynomial_basis(rescale_scores(ps, *rescale_bounds), degree)
    if basis.ndim == 1:
        basis = basis.reshape(dataset.n, -1)
    basis_names = tuple(f"ps^{k}" for k in range(1, degree + 1))

    t_z = cols["t_z"]
    t_mean = float(np.mean(t_z)) if t_z.size else 0.0
    t_sd = float(np.std(t_z, ddof=1)) if t_z.size > 1 else 1.0
    if not np.isfinite(t_sd) or t_sd == 0.0:
        t_sd = 1.0
    t_std = (t_z - t_mean) / t_sd

    one = np.ones((dataset.n, 1))
    x1_ll = np.column_stack([one, cols["z"], t_std, basis])
    x1_other = np.column_stack([one, basis])

    def extra(names: Sequence[str]) -> tuple[np.ndarray, tuple[str, ...]]:
        if not names:
            return np.empty((dataset.n, 0)), ()
        arrays = [dataset.column(n) for n in names]
        return np.column_stack(arrays), tuple(names)

    x2_extra, x2_extra_names = extra(x2_covariates)
    x3_extra, x3_extra_names = extra(x3_covariates)
    x2 = np.column_stack([one, basis, x2_extra])
    x3 = np.column_stack([one, basis, x3_extra])

    group_index = {group: code for code, group in enumerate(GROUP_ORDER)}
    group_codes = np.array(
        [group_index[classify_observed_group(rec)] for rec in dataset.records],
        dtype=int,
    )
    return ModelDesign(
        x1_ll=x1_ll,
        x1_other=x1_other,
        x2=x2,
        x3=x3,
        y=cols["y"],
        z=cols["z"],
        s=cols["s"],
        m=cols["m"],
        group_codes=group_codes,
        monotonicity=monotonicity,
        ids=tuple(rec.id for rec in dataset.records),
        x1_ll_columns=("intercept", "z", "t_z") + basis_names,
        x1_other_columns=("intercept",) + basis_names,
        x2_columns=("intercept",) + basis_names + x2_extra_names,
        x3_columns=("intercept",) + basis_names + x3_extra_names,
        t_z_scale=(t_mean, t_sd),
        ps=ps,
    )


# ---------------------------------------------------------------------------
# scalar (per-record) evaluation


def strata_probs(
    params: StrataParams, x2: np.ndarray, monotonicity: bool = False
) -> np.ndarray:
    """Stratum probabilities in LL, LD, (DL,) DD order; softmax with reference at 0."""
    strata = active_strata(monotonicity)
    x2 = np.asarray(x2, dtype=float)
    logits = np.empty(len(strata))
    for j, g in enumerate(strata):
        if g is REFERENCE_STRATUM:
            logits[j] = 0.0
        else:
            if g not in params.alpha:
                raise ValueError(f"missing coefficients for stratum {g.value}")
            logits[j] = float(params.alpha[g] @ x2)
    logits -= logits.max()
    probs = np.exp(logits)
    return probs / probs.sum()


def missing_prob(
    params: MissingnessParams, g: PrincipalStratum, z: int, x3: np.ndarray
) -> float:
    """P(outcome missing | stratum, arm, survivor) for a valid (stratum, arm) pair."""
    if (g, z) not in MISSING_BLOCKS:
        raise ValueError(f"no survivors exist in stratum {g.value} under arm z={z}")
    if (g, z) not in params.theta:
        raise ValueError(f"missing coefficients for block ({g.value}, z={z})")
    return float(expit(params.theta[(g, z)] @ np.asarray(x3, dtype=float)))


def outcome_logdensity(
    params: OutcomeParams, g: PrincipalStratum, x1: np.ndarray, y: float
) -> float:
    """Normal log-density of the outcome for a survivable stratum."""
    if g is PrincipalStratum.DD:
        raise ValueError("the never-survivor stratum has no outcome distribution")
    if g not in params.eta:
        raise ValueError(f"missing outcome coefficients for stratum {g.value}")
    mu = float(params.eta[g] @ np.asarray(x1, dtype=float))
    s2 = params.sigma2[g]
    return -0.5 * (np.log(2.0 * np.pi * s2) + (y - mu) ** 2 / s2)


def complete_data_logcontribution(
    row: DesignRow,
    g: PrincipalStratum,
    params: ModelParams,
    mode: str = "latent",
    monotonicity: bool = False,
) -> float:
    """Log complete-data cell for one record with its stratum taken as known.

    ln pi_g, plus the missingness factor for survivors in latent mode, plus the
    outcome log-density when the outcome was observed (a missing outcome
    contributes factor one).
    """
    check_mode(mode)
    if g not in feasible_strata(row.group, monotonicity):
        raise ValueError(
            f"stratum {g.value} is not feasible for observed group {row.group.name}"
        )
    probs = strata_probs(params.strata, row.x2, monotonicity)
    col = {st: j for j, st in enumerate(active_strata(monotonicity))}
    total = float(np.log(probs[col[g]]))
    if row.s == 1 and mode == "latent":
        if params.missingness is None:
            raise ValueError("latent mode requires missingness parameters")
        phi = missing_prob(params.missingness, g, row.z, row.x3)
        total += float(np.log(phi)) if row.m == 1 else float(np.log1p(-phi))
    if row.s == 1 and row.m == 0:
        total += outcome_logdensity(params.outcome, g, row.x1_for(g), row.y)
    return total


# ---------------------------------------------------------------------------
# vectorized evaluation


def _strata_logprob_rows(
    params: StrataParams, x2: np.ndarray, strata: tuple[PrincipalStratum, ...]
) -> np.ndarray:
    logits = np.zeros((x2.shape[0], len(strata)))
    for j, g in enumerate(strata):
        if g is not REFERENCE_STRATUM:
            logits[:, j] = x2 @ params.alpha[g]
    shift = logits.max(axis=1, keepdims=True)
    logits -= shift
    return logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))


def log_cell_matrix(
    design: ModelDesign,
    params: ModelParams,
    mode: str = "latent",
    include_outcome: bool = True,
) -> np.ndarray:
    """(n, n_strata) log complete-data cells; infeasible entries are -inf."""
    check_mode(mode)
    params.require_for_mode(mode)
    strata = design.strata
    cells = np.full((design.n, len(strata)), -np.inf)
    log_pi = _strata_logprob_rows(params.strata, design.x2, strata)
    for group, rows in design.group_rows.items():
        if rows.size == 0:
            continue
        for j in design.feasible_cols[group]:
            cells[rows, j] = log_pi[rows, j]
    if mode == "latent":
        mp = params.missingness
        for g, arm in missing_blocks(design.monotonicity):
            rows = design.survivor_rows[arm]
            if rows.size == 0:
                continue
            u = design.x3[rows] @ mp.theta[(g, arm)]
            is_missing = design.m[rows] == 1
            factor = np.where(is_missing, _log_expit(u), _log_expit(-u))
            cells[rows, design.stratum_col[g]] += factor
    if include_outcome:
        for g in outcome_strata(design.monotonicity):
            rows = design.outcome_rows[g]
            if rows.size == 0:
                continue
            mu = design.x1_for(g)[rows] @ params.outcome.eta[g]
            s2 = params.outcome.sigma2[g]
            dev = design.y[rows] - mu
            with np.errstate(over="ignore"):  # extreme deviations saturate to -inf
                cells[rows, design.stratum_col[g]] += -0.5 * (
                    np.log(2.0 * np.pi * s2) + dev * dev / s2
                )
    return cells


def observed_data_loglik(
    design: ModelDesign, params: ModelParams, mode: str = "latent"
) -> float:
    """Sum over included records of the log feasible-strata mixture."""
    cells = log_cell_matrix(design, params, mode)
    mask = design.included_mask(mode)
    if not mask.any():
        return 0.0
    return float(np.sum(logsumexp(cells[mask], axis=1)))


def outcome_conditional_loglik(
    design: ModelDesign, params: ModelParams, mode: str = "latent"
) -> float:
    """Log-likelihood of the observed outcomes given group membership and retention.

    Normalizing each record's mixture weights makes the value comparable
    across missingness modes: every mode is scored on the same records
    (survivors with observed outcomes) by a proper conditional density.
    """
    full = log_cell_matrix(design, params, mode, include_outcome=True)
    bare = log_cell_matrix(design, params, mode, include_outcome=False)
    rows = design.observed_outcome_mask
    if not rows.any():
        return 0.0
    return float(
        np.sum(logsumexp(full[rows], axis=1) - logsumexp(bare[rows], axis=1))
    )


def stratum_posteriors(
    design: ModelDesign, params: ModelParams, mode: str = "latent"
) -> np.ndarray:
    """Conditional stratum probabilities per record: cell over row total."""
    cells = log_cell_matrix(design, params, mode)
    norm = logsumexp(cells, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm.ravel()))[0])
        raise FloatingPointError(
            f"all feasible strata have zero likelihood for record index {bad}"
        )
    return np.exp(cells - norm)
