"""Data-augmentation MCMC: impute latent strata, then update parameters.

Each iteration alternates an imputation step (strata drawn from their
cell/row-total conditionals) with three posterior steps: exact
normal-inverse-gamma draws for the outcome regressions, and random-walk
Metropolis blocks for the stratum and missingness logits. Proposal scales
adapt toward a 0.35 acceptance rate during burn-in only, so the post-burn-in
kernel is fixed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from .data import PrincipalStratum
from .likelihood import (
    ModelDesign,
    ModelParams,
    MissingnessParams,
    OutcomeParams,
    Priors,
    StrataParams,
    REFERENCE_STRATUM,
    active_strata,
    check_mode,
    log_cell_matrix,
    missing_blocks,
    outcome_strata,
    stratum_posteriors,
)

__all__ = [
    "NumericalError",
    "SamplerConfig",
    "ChainState",
    "ParamLayout",
    "PosteriorSamples",
    "SACE_PARAM",
    "TREATMENT_TIME_PARAM",
    "i_step",
    "i_step_probabilities",
    "p_step_outcome",
    "p_step_strata",
    "p_step_missing",
    "run_chain",
    "initial_state",
    "write_draws_csv",
    "read_draws_csv",
]

SACE_PARAM = "eta_LL_z"
TREATMENT_TIME_PARAM = "eta_LL_t_z"

_TARGET_ACCEPT = 0.35
_SIGMA2_CAP = 1e300


class NumericalError(RuntimeError):
    """A sampler block produced a non-finite parameter."""


@dataclass
class SamplerConfig:
    iterations: int = 5000
    burn_in: int = 3000
    thin: int = 1
    seed: int = 0
    chains: int = 1
    mh_step_alpha: float = 0.2
    mh_step_theta: float = 0.2
    adapt_during_burnin: bool = True
    mode: str = "latent"
    monotonicity: bool = False
    ps_degree: int = 2
    n_jobs: int = 1

    def __post_init__(self) -> None:
        check_mode(self.mode)
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not (self.mh_step_alpha > 0 and self.mh_step_theta > 0):
            raise ValueError("proposal scales must be positive")

    @property
    def draws_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class ChainState:
    """Current parameters plus the per-record imputed stratum column index."""

    params: ModelParams
    g: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class ParamLayout:
    """Flat packing of all sampled parameters, with stable names."""

    names: tuple[str, ...]
    alpha_slices: tuple[tuple[PrincipalStratum, slice], ...]
    eta_slices: tuple[tuple[PrincipalStratum, slice], ...]
    sigma2_index: tuple[tuple[PrincipalStratum, int], ...]
    theta_slices: tuple[tuple[tuple[PrincipalStratum, int], slice], ...]

    @classmethod
    def build(cls, design: ModelDesign, mode: str) -> "ParamLayout":
        names: list[str] = []
        alpha_slices = []
        for g in active_strata(design.monotonicity):
            if g is REFERENCE_STRATUM:
                continue
            start = len(names)
            names.extend(f"alpha_{g.value}_{c}" for c in design.x2_columns)
            alpha_slices.append((g, slice(start, len(names))))
        eta_slices = []
        sigma2_index = []
        for g in outcome_strata(design.monotonicity):
            start = len(names)
            names.extend(f"eta_{g.value}_{c}" for c in design.x1_columns_for(g))
            eta_slices.append((g, slice(start, len(names))))
        for g in outcome_strata(design.monotonicity):
            sigma2_index.append((g, len(names)))
            names.append(f"sigma2_{g.value}")
        theta_slices = []
        if mode == "latent":
            for g, arm in missing_blocks(design.monotonicity):
                start = len(names)
                names.extend(f"theta_{g.value}{arm}_{c}" for c in design.x3_columns)
                theta_slices.append(((g, arm), slice(start, len(names))))
        return cls(
            tuple(names),
            tuple(alpha_slices),
            tuple(eta_slices),
            tuple(sigma2_index),
            tuple(theta_slices),
        )

    @property
    def size(self) -> int:
        return len(self.names)

    def pack(self, params: ModelParams) -> np.ndarray:
        vec = np.empty(self.size)
        for g, sl in self.alpha_slices:
            vec[sl] = params.strata.alpha[g]
        for g, sl in self.eta_slices:
            vec[sl] = params.outcome.eta[g]
        for g, idx in self.sigma2_index:
            vec[idx] = params.outcome.sigma2[g]
        for key, sl in self.theta_slices:
            vec[sl] = params.missingness.theta[key]
        return vec

    def unpack(self, vec: np.ndarray) -> ModelParams:
        alpha = {g: np.array(vec[sl]) for g, sl in self.alpha_slices}
        eta = {g: np.array(vec[sl]) for g, sl in self.eta_slices}
        sigma2 = {g: float(vec[idx]) for g, idx in self.sigma2_index}
        missing = None
        if self.theta_slices:
            missing = MissingnessParams(
                {key: np.array(vec[sl]) for key, sl in self.theta_slices}
            )
        return ModelParams(StrataParams(alpha), OutcomeParams(eta, sigma2), missing)


@dataclass
class PosteriorSamples:
    """Post burn-in, thinned draws for one or more chains."""

    names: tuple[str, ...]
    chains: tuple[np.ndarray, ...]
    acceptance_rates: dict[str, float] = field(default_factory=dict)
    config: SamplerConfig | None = None
    layout: ParamLayout | None = None

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return int(sum(c.shape[0] for c in self.chains))

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def draws(self, name: str) -> np.ndarray:
        """Draws pooled across chains, in chain order."""
        j = self.index_of(name)
        return np.concatenate([c[:, j] for c in self.chains])

    def chain_draws(self, chain: int, name: str) -> np.ndarray:
        return self.chains[chain][:, self.index_of(name)]

    def matrix(self) -> np.ndarray:
        return np.vstack(self.chains)


# ---------------------------------------------------------------------------
# I-step


def i_step_probabilities(
    state: ChainState, design: ModelDesign, mode: str = "latent"
) -> np.ndarray:
    """Conditional stratum probabilities (cell over row total) per record."""
    return stratum_posteriors(design, state.params, mode)


def i_step(
    state: ChainState, design: ModelDesign, rng: np.random.Generator, mode: str = "latent"
) -> ChainState:
    """Redraw every record's stratum from its feasible-pair conditional."""
    cells = log_cell_matrix(design, state.params, mode)
    g = np.empty(design.n, dtype=int)
    for group in design.group_rows:  # fixed group order keeps draws reproducible
        rows = design.group_rows[group]
        cols = design.feasible_cols[group]
        if rows.size == 0:
            continue
        if len(cols) == 1:
            g[rows] = cols[0]
            continue
        first, second = cols
        c1 = cells[rows, first]
        c2 = cells[rows, second]
        dead = np.isneginf(c1) & np.isneginf(c2)
        if dead.any():
            bad = int(rows[np.flatnonzero(dead)[0]])
            raise NumericalError(
                f"both feasible strata have log-likelihood -inf for record index {bad}"
            )
        with np.errstate(over="ignore"):
            p_first = 1.0 / (1.0 + np.exp(c2 - c1))
        u = rng.random(rows.size)
        g[rows] = np.where(u < p_first, first, second)
    return replace(state, g=g)


# ---------------------------------------------------------------------------
# P-steps


def _check_block_finite(values: np.ndarray, block: str, iteration: int) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite parameter in block {block} at iteration {iteration}")


def p_step_outcome(
    state: ChainState,
    design: ModelDesign,
    priors: Priors,
    rng: np.random.Generator,
) -> ChainState:
    """Exact conjugate draw of (eta_g, sigma2_g) given the imputed strata.

    Strata with no observed-outcome members reduce to a draw from the prior.
    """
    eta = dict(state.params.outcome.eta)
    sigma2 = dict(state.params.outcome.sigma2)
    for g in outcome_strata(design.monotonicity):
        rows = design.outcome_rows[g]
        rows = rows[state.g[rows] == design.stratum_col[g]]
        X = design.x1_for(g)[rows]
        yv = design.y[rows]
        mu0 = priors.mu[g]
        v_chol = cho_factor(priors.v[g], lower=True)
        v_inv = cho_solve(v_chol, np.eye(mu0.size))
        precision = v_inv + X.T @ X
        try:
            prec_chol = np.linalg.cholesky(precision)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"posterior precision for stratum {g.value} is not positive definite"
            ) from None
        lin = v_inv @ mu0 + X.T @ yv
        mu_n = cho_solve((prec_chol, True), lin)
        nu_n = priors.nu[g] + 0.5 * rows.size
        omega_n = priors.omega[g] + 0.5 * (
            float(yv @ yv) + float(mu0 @ (v_inv @ mu0)) - float(mu_n @ (precision @ mu_n))
        )
        if not omega_n > 0:
            raise NumericalError(f"non-positive posterior scale for stratum {g.value}")
        gamma_draw = rng.gamma(nu_n)
        s2 = omega_n / gamma_draw if gamma_draw > 0 else _SIGMA2_CAP
        s2 = min(s2, _SIGMA2_CAP)  # vague priors on empty strata can underflow the gamma
        noise = rng.standard_normal(mu0.size)
        draw = mu_n + np.sqrt(s2) * solve_triangular(prec_chol.T, noise, lower=False)
        _check_block_finite(draw, f"eta_{g.value}", state.iteration)
        eta[g] = draw
        sigma2[g] = float(s2)
    params = replace(state.params, outcome=OutcomeParams(eta, sigma2))
    return replace(state, params=params)


def _mh_accept(log_ratio: float, rng: np.random.Generator) -> tuple[float, bool]:
    prob = float(np.exp(min(0.0, log_ratio)))
    return prob, bool(rng.random() < prob)


def p_step_strata(
    state: ChainState,
    design: ModelDesign,
    priors: Priors,
    rng: np.random.Generator,
    step_sizes: Mapping[str, float] | float = 0.2,
    accept_out: dict | None = None,
) -> ChainState:
    """Random-walk Metropolis update of each stratum-logit block.

    The target is the multinomial likelihood of the currently imputed strata
    times an independent normal prior on each coefficient block.
    """
    strata = design.strata
    alpha = dict(state.params.strata.alpha)
    logits = np.zeros((design.n, len(strata)))
    for g, j in design.stratum_col.items():
        if g is not REFERENCE_STRATUM:
            logits[:, j] = design.x2 @ alpha[g]
    rows_all = np.arange(design.n)
    sel_sum = float(logits[rows_all, state.g].sum())
    lse_sum = float(logsumexp(logits, axis=1).sum())
    var0 = priors.alpha_sd**2
    for g in strata:
        if g is REFERENCE_STRATUM:
            continue
        name = f"alpha_{g.value}"
        step = step_sizes[name] if isinstance(step_sizes, Mapping) else step_sizes
        col = design.stratum_col[g]
        current = alpha[g]
        proposal = current + step * rng.standard_normal(current.size)
        new_col = design.x2 @ proposal
        mine = state.g == col
        sel_new = sel_sum + float(new_col[mine].sum() - logits[mine, col].sum())
        trial = logits.copy()
        trial[:, col] = new_col
        lse_new = float(logsumexp(trial, axis=1).sum())
        log_prior_delta = (current @ current - proposal @ proposal) / (2.0 * var0)
        log_ratio = (sel_new - lse_new) - (sel_sum - lse_sum) + log_prior_delta
        prob, accepted = _mh_accept(log_ratio, rng)
        if accept_out is not None:
            accept_out[name] = (prob, accepted)
        if accepted:
            _check_block_finite(proposal, name, state.iteration)
            alpha[g] = proposal
            logits = trial
            sel_sum, lse_sum = sel_new, lse_new
    params = replace(state.params, strata=StrataParams(alpha))
    return replace(state, params=params)


def _bernoulli_loglik(theta: np.ndarray, X: np.ndarray, miss: np.ndarray) -> float:
    u = X @ theta
    # log expit(u) = -softplus(-u); miss==1 contributes log phi, else log (1-phi)
    return float(np.sum(np.where(miss, -np.logaddexp(0.0, -u), -np.logaddexp(0.0, u))))


def p_step_missing(
    state: ChainState,
    design: ModelDesign,
    priors: Priors,
    rng: np.random.Generator,
    step_sizes: Mapping[str, float] | float = 0.2,
    accept_out: dict | None = None,
    mode: str = "latent",
) -> ChainState:
    """Random-walk Metropolis update per (stratum, arm) missingness block."""
    if mode != "latent":
        return state
    if state.params.missingness is None:
        raise ValueError("latent mode requires missingness parameters")
    theta = dict(state.params.missingness.theta)
    var0 = priors.theta_sd**2
    for g, arm in missing_blocks(design.monotonicity):
        name = f"theta_{g.value}{arm}"
        step = step_sizes[name] if isinstance(step_sizes, Mapping) else step_sizes
        rows = design.survivor_rows[arm]
        rows = rows[state.g[rows] == design.stratum_col[g]]
        X = design.x3[rows]
        miss = design.m[rows] == 1
        current = theta[(g, arm)]
        proposal = current + step * rng.standard_normal(current.size)
        log_ratio = (
            _bernoulli_loglik(proposal, X, miss)
            - _bernoulli_loglik(current, X, miss)
            + (current @ current - proposal @ proposal) / (2.0 * var0)
        )
        prob, accepted = _mh_accept(log_ratio, rng)
        if accept_out is not None:
            accept_out[name] = (prob, accepted)
        if accepted:
            _check_block_finite(proposal, name, state.iteration)
            theta[(g, arm)] = proposal
    params = replace(state.params, missingness=MissingnessParams(theta))
    return replace(state, params=params)


# ---------------------------------------------------------------------------
# chain driver


def initial_state(
    design: ModelDesign, mode: str, rng: np.random.Generator
) -> ChainState:
    """Deterministic parameter init; strata then drawn by one imputation pass.

    The always-survivor regression starts at the pooled least-squares fit of
    the observed survivors (the only component spanning both arms) with its
    residual variance, while the single-arm components start at their arm
    means with inflated variance. Starting the shared component tight keeps
    the first imputation passes from handing an arm wholesale to a
    single-arm stratum, a sticky relabeled mode of the mixture.
    """
    obs = design.observed_outcome_mask
    yobs = design.y[obs]
    ybar = float(yobs.mean()) if yobs.size else 0.0
    yvar = float(yobs.var(ddof=1)) if yobs.size > 1 else 1.0
    yvar = max(yvar, 1e-2)
    eta = {}
    sigma2 = {}
    for g in outcome_strata(design.monotonicity):
        vec = np.zeros(design.x1_dim(g))
        vec[0] = ybar
        eta[g] = vec
        sigma2[g] = 4.0 * yvar
    if yobs.size > 2:
        X = design.x1_ll[obs]
        coef, _, _, _ = np.linalg.lstsq(X, yobs, rcond=None)
        resid = yobs - X @ coef
        if np.all(np.isfinite(coef)):
            eta[PrincipalStratum.LL] = coef
            sigma2[PrincipalStratum.LL] = max(float(resid.var(ddof=1)), 1e-2)
        arm_of = {PrincipalStratum.LD: 1, PrincipalStratum.DL: 0}
        for g in outcome_strata(design.monotonicity):
            if g is PrincipalStratum.LL:
                continue
            arm_y = design.y[obs & (design.z == arm_of[g])]
            if arm_y.size:
                eta[g][0] = float(arm_y.mean())
    alpha = {
        g: np.zeros(design.x2.shape[1])
        for g in active_strata(design.monotonicity)
        if g is not REFERENCE_STRATUM
    }
    missing = None
    if mode == "latent":
        missing = MissingnessParams(
            {
                (g, arm): np.zeros(design.x3.shape[1])
                for g, arm in missing_blocks(design.monotonicity)
            }
        )
    params = ModelParams(StrataParams(alpha), OutcomeParams(eta, sigma2), missing)
    state = ChainState(params=params, g=np.zeros(design.n, dtype=int), iteration=0)
    return i_step(state, design, rng, mode)


def _adapt(step: float, prob: float, iteration: int) -> float:
    gain = iteration ** -0.6
    return float(np.clip(step * np.exp(gain * (prob - _TARGET_ACCEPT)), 1e-5, 50.0))


def _run_single_chain(
    design: ModelDesign,
    config: SamplerConfig,
    priors: Priors,
    layout: ParamLayout,
    seed_seq: np.random.SeedSequence,
) -> tuple[np.ndarray, dict[str, float]]:
    rng = np.random.default_rng(seed_seq)
    mode = config.mode
    state = initial_state(design, mode, rng)
    step_sizes: dict[str, float] = {}
    for g, _ in layout.alpha_slices:
        step_sizes[f"alpha_{g.value}"] = config.mh_step_alpha
    for (g, arm), _ in layout.theta_slices:
        step_sizes[f"theta_{g.value}{arm}"] = config.mh_step_theta
    draws = np.empty((config.draws_per_chain, layout.size))
    accept_counts = {name: 0 for name in step_sizes}
    kept = 0
    for it in range(1, config.iterations + 1):
        state = replace(state, iteration=it)
        state = i_step(state, design, rng, mode)
        state = p_step_outcome(state, design, priors, rng)
        info: dict[str, tuple[float, bool]] = {}
        state = p_step_strata(state, design, priors, rng, step_sizes, info)
        state = p_step_missing(state, design, priors, rng, step_sizes, info, mode=mode)
        if config.adapt_during_burnin and it <= config.burn_in:
            for name, (prob, _) in info.items():
                step_sizes[name] = _adapt(step_sizes[name], prob, it)
        if it > config.burn_in:
            for name, (_, accepted) in info.items():
                accept_counts[name] += int(accepted)
            if (it - config.burn_in) % config.thin == 0:
                draws[kept] = layout.pack(state.params)
                kept += 1
    post = config.iterations - config.burn_in
    rates = {name: count / post for name, count in accept_counts.items()}
    return draws[:kept], rates


def run_chain(
    design: ModelDesign, config: SamplerConfig, priors: Priors
) -> PosteriorSamples:
    """Run one or more chains; deterministic given (seed, config, data)."""
    if config.mode == "mcar":
        design = design.complete_cases()
    layout = ParamLayout.build(design, config.mode)
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(design, config, priors, layout, seeds[c]) for c in range(config.chains)]
    if config.chains == 1 or config.n_jobs == 1:
        results = [_run_single_chain(*args) for args in jobs]
    else:
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_single_chain)(*args) for args in jobs
        )
    chains = tuple(draws for draws, _ in results)
    rates: dict[str, float] = {}
    for name in results[0][1]:
        rates[name] = float(np.mean([r[name] for _, r in results]))
    return PosteriorSamples(
        names=layout.names,
        chains=chains,
        acceptance_rates=rates,
        config=config,
        layout=layout,
    )


# ---------------------------------------------------------------------------
# draw persistence


def write_draws_csv(samples: PosteriorSamples, path: str | Path) -> None:
    """Long-format draw log; float repr keeps values bit-exact on re-read."""
    config = samples.config
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", "parameter_name", "value"])
        for c, chain in enumerate(samples.chains):
            for k in range(chain.shape[0]):
                if config is not None:
                    iteration = config.burn_in + (k + 1) * config.thin
                else:
                    iteration = k + 1
                for j, name in enumerate(samples.names):
                    writer.writerow([c, iteration, name, repr(float(chain[k, j]))])


def read_draws_csv(path: str | Path) -> PosteriorSamples:
    """Rebuild samples from a draw log (no layout; summaries only)."""
    path = Path(path)
    per_chain: dict[int, dict[int, dict[str, float]]] = {}
    names: list[str] = []
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["chain", "iteration", "parameter_name", "value"]:
            raise ValueError(f"{path}: not a draw log (bad header {header!r})")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                chain = int(row[0])
                iteration = int(row[1])
                value = float(row[3])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed draw row") from None
            name = row[2]
            if name not in seen:
                seen.add(name)
                names.append(name)
            per_chain.setdefault(chain, {}).setdefault(iteration, {})[name] = value
    if not per_chain:
        raise ValueError(f"{path}: no draws found")
    chains = []
    for chain_id in sorted(per_chain):
        iters = sorted(per_chain[chain_id])
        matrix = np.empty((len(iters), len(names)))
        for i, it in enumerate(iters):
            rowvals = per_chain[chain_id][it]
            if len(rowvals) != len(names):
                raise ValueError(
                    f"{path}: chain {chain_id} iteration {it} has "
                    f"{len(rowvals)} of {len(names)} parameters (truncated file?)"
                )
            for j, name in enumerate(names):
                matrix[i, j] = rowvals[name]
        chains.append(matrix)
    return PosteriorSamples(names=tuple(names), chains=tuple(chains))
