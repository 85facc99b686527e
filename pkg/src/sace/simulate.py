"""Synthetic data generator with known strata and known survivor effect.

The generating pipeline draws covariates, a latent stratum, and a candidate
treatment time from a proportional-hazards law; treatment happens only if that
time precedes both the horizon and the subject's untreated death time, and
realized survival always matches the stratum letter of the realized arm.
Survivor outcomes come from per-stratum normal regressions on the raw score
polynomial; missingness follows the configured mechanism.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cox import polynomial_basis
from .data import Dataset, MissingState, PatientRecord, PrincipalStratum
from .likelihood import MISSING_BLOCKS, STRATA_ORDER, check_mode

__all__ = [
    "SimConfig",
    "SimTruth",
    "simulate",
    "write_truth_manifest",
    "read_truth_manifest",
    "naive_survivor_difference",
    "reference_config",
    "confounded_config",
    "low_dl_config",
]


def _default_alpha() -> dict[PrincipalStratum, np.ndarray]:
    return {
        PrincipalStratum.LL: np.array([0.3, -0.5, -0.15]),
        PrincipalStratum.LD: np.array([-0.6, 0.4, 0.0]),
        PrincipalStratum.DL: np.array([-1.0, -0.3, 0.0]),
    }


def _default_eta() -> dict[PrincipalStratum, np.ndarray]:
    return {
        PrincipalStratum.LL: np.array([23.5, 3.0, 0.06, -1.2, 0.25]),
        PrincipalStratum.LD: np.array([21.0, -0.8, 0.2]),
        PrincipalStratum.DL: np.array([27.5, 0.6, 0.15]),
    }


def _default_sigma2() -> dict[PrincipalStratum, float]:
    return {
        PrincipalStratum.LL: 2.0,
        PrincipalStratum.LD: 2.5,
        PrincipalStratum.DL: 2.5,
    }


def _default_theta() -> dict[tuple[PrincipalStratum, int], np.ndarray]:
    return {
        (PrincipalStratum.LL, 1): np.array([-1.6, 0.5, 0.0]),
        (PrincipalStratum.LL, 0): np.array([-0.7, -0.5, 0.0]),
        (PrincipalStratum.LD, 1): np.array([0.9, 0.3, 0.0]),
        (PrincipalStratum.DL, 0): np.array([0.6, -0.3, 0.0]),
    }


def _default_theta_arm() -> dict[int, np.ndarray]:
    return {1: np.array([-1.2, 0.4, 0.0]), 0: np.array([-0.8, -0.3, 0.0])}


@dataclass
class SimConfig:
    """Generating parameters; coefficient vectors are on (1, ps, ..., ps^d)."""

    n: int
    seed: int = 0
    p: int = 3
    covariate_corr: float = 0.0
    beta: np.ndarray = field(default_factory=lambda: np.array([0.6, -0.5, 0.4]))
    base_rate: float = 0.05
    ps_degree: int = 2
    alpha: dict[PrincipalStratum, np.ndarray] = field(default_factory=_default_alpha)
    eta: dict[PrincipalStratum, np.ndarray] = field(default_factory=_default_eta)
    sigma2: dict[PrincipalStratum, float] = field(default_factory=_default_sigma2)
    mechanism: str = "latent"
    theta: dict[tuple[PrincipalStratum, int], np.ndarray] = field(
        default_factory=_default_theta
    )
    theta_arm: dict[int, np.ndarray] = field(default_factory=_default_theta_arm)
    missing_rate: float = 0.2
    t_o: float = 18.0
    post_horizon_scale: float = 12.0

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError("n must be positive")
        check_mode(self.mechanism)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.beta.shape != (self.p,):
            raise ValueError("beta must have one coefficient per covariate")
        for g, s2 in self.sigma2.items():
            if not s2 > 0:
                raise ValueError(f"sigma2[{g.value}] must be positive")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        k = self.ps_degree + 1
        for g, vec in self.alpha.items():
            if np.asarray(vec).shape != (k,):
                raise ValueError(f"alpha[{g.value}] must have length {k}")
        for g, vec in self.eta.items():
            want = k + 2 if g is PrincipalStratum.LL else k
            if np.asarray(vec).shape != (want,):
                raise ValueError(f"eta[{g.value}] must have length {want}")

    @property
    def true_sace(self) -> float:
        return float(self.eta[PrincipalStratum.LL][1])


@dataclass(eq=False)
class SimTruth:
    """Per-record strata and the generating configuration."""

    config: SimConfig
    strata: tuple[PrincipalStratum, ...]
    counts: dict[str, int]

    @property
    def true_sace(self) -> float:
        return self.config.true_sace

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "n": cfg.n,
            "seed": cfg.seed,
            "p": cfg.p,
            "covariate_corr": cfg.covariate_corr,
            "beta": cfg.beta.tolist(),
            "base_rate": cfg.base_rate,
            "ps_degree": cfg.ps_degree,
            "alpha": {g.value: np.asarray(v).tolist() for g, v in cfg.alpha.items()},
            "eta": {g.value: np.asarray(v).tolist() for g, v in cfg.eta.items()},
            "sigma2": {g.value: float(v) for g, v in cfg.sigma2.items()},
            "mechanism": cfg.mechanism,
            "theta": {
                f"{g.value}_{arm}": np.asarray(v).tolist()
                for (g, arm), v in cfg.theta.items()
            },
            "theta_arm": {str(arm): np.asarray(v).tolist() for arm, v in cfg.theta_arm.items()},
            "missing_rate": cfg.missing_rate,
            "t_o": cfg.t_o,
            "post_horizon_scale": cfg.post_horizon_scale,
            "true_sace": self.true_sace,
            "strata": [g.value for g in self.strata],
            "counts": dict(self.counts),
        }


def simulate(config: SimConfig) -> tuple[Dataset, SimTruth]:
    """Generate one dataset plus its ground truth; a pure function of the config."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    n, p = config.n, config.p

    if config.covariate_corr != 0.0:
        cov = np.full((p, p), config.covariate_corr)
        np.fill_diagonal(cov, 1.0)
        X = rng.standard_normal((n, p)) @ np.linalg.cholesky(cov).T
    else:
        X = rng.standard_normal((n, p))
    ps = X @ config.beta
    basis = np.column_stack([np.ones(n), polynomial_basis(ps, config.ps_degree)])

    # latent stratum from the multinomial logit (reference DD at zero)
    logits = np.zeros((n, 4))
    for j, g in enumerate(STRATA_ORDER):
        if g in config.alpha:
            logits[:, j] = basis @ np.asarray(config.alpha[g], dtype=float)
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    g_code = (rng.random((n, 1)) < cum).argmax(axis=1)
    strata = tuple(STRATA_ORDER[c] for c in g_code)

    surv_treated = np.array([g.survives(1) for g in strata])
    surv_control = np.array([g.survives(0) for g in strata])

    # candidate treatment time (proportional hazards in the covariates)
    t_candidate = rng.exponential(1.0 / (config.base_rate * np.exp(ps)))
    # untreated death time, consistent with the control-arm letter
    tail = config.t_o + rng.exponential(config.post_horizon_scale, size=n)
    early = rng.uniform(0.0, config.t_o, size=n)
    t_s0 = np.where(surv_control, tail, early)

    treated = t_candidate < np.minimum(t_s0, config.t_o)
    z = treated.astype(int)
    s = np.where(treated, surv_treated, surv_control).astype(int)

    # death under treatment happens after t_z but before the horizon
    tail_treated = config.t_o + rng.exponential(config.post_horizon_scale, size=n)
    death_frac = rng.uniform(0.0, 1.0, size=n)
    t_s = np.where(
        treated,
        np.where(
            surv_treated,
            tail_treated,
            t_candidate + death_frac * (config.t_o - t_candidate),
        ),
        t_s0,
    )
    t_z = np.where(treated, t_candidate, np.minimum(t_s, config.t_o))

    # survivor outcomes
    eps = rng.standard_normal(n)
    y = np.full(n, np.nan)
    for g in (PrincipalStratum.LL, PrincipalStratum.LD, PrincipalStratum.DL):
        rows = np.flatnonzero((s == 1) & (g_code == STRATA_ORDER.index(g)))
        if rows.size == 0:
            continue
        if g is PrincipalStratum.LL:
            design = np.column_stack(
                [np.ones(rows.size), z[rows], t_z[rows], basis[rows, 1:]]
            )
        else:
            design = basis[rows]
        mu = design @ np.asarray(config.eta[g], dtype=float)
        y[rows] = mu + math.sqrt(config.sigma2[g]) * eps[rows]

    # missingness among survivors
    u_miss = rng.random(n)
    phi = np.zeros(n)
    surv_rows = np.flatnonzero(s == 1)
    if config.mechanism == "latent":
        for (g, arm) in MISSING_BLOCKS:
            rows = surv_rows[
                (g_code[surv_rows] == STRATA_ORDER.index(g)) & (z[surv_rows] == arm)
            ]
            if rows.size == 0:
                warnings.warn(
                    f"no survivors realized in stratum {g.value} under arm z={arm}; "
                    "its missingness block is unused",
                    stacklevel=2,
                )
                continue
            phi[rows] = 1.0 / (1.0 + np.exp(-(basis[rows] @ config.theta[(g, arm)])))
    elif config.mechanism == "ignorable":
        for arm in (0, 1):
            rows = surv_rows[z[surv_rows] == arm]
            if rows.size:
                phi[rows] = 1.0 / (1.0 + np.exp(-(basis[rows] @ config.theta_arm[arm])))
    else:  # mcar
        phi[surv_rows] = config.missing_rate
    missing = (u_miss < phi) & (s == 1)

    records = []
    width = len(str(n))
    for i in range(n):
        if s[i] == 1:
            state = MissingState.MISSING if missing[i] else MissingState.OBSERVED
            yi = None if missing[i] else float(y[i])
        else:
            state = MissingState.UNDEFINED
            yi = None
        records.append(
            PatientRecord(
                id=f"sim{i + 1:0{width}d}",
                z=int(z[i]),
                t_z=float(t_z[i]),
                s=int(s[i]),
                t_s=float(t_s[i]),
                m=state,
                y=yi,
                covariates=X[i],
            )
        )
    dataset = Dataset(
        tuple(records),
        t_o=config.t_o,
        covariate_names=tuple(f"x{j + 1}" for j in range(p)),
    )
    for rec, g in zip(records, strata):
        assert rec.s == int(g.survives(rec.z))
    counts = {g.value: 0 for g in STRATA_ORDER}
    for g in strata:
        counts[g.value] += 1
    return dataset, SimTruth(config=config, strata=strata, counts=counts)


def naive_survivor_difference(dataset: Dataset) -> float:
    """Observed-outcome survivor mean difference, treated minus untreated."""
    cols = dataset.arrays()
    obs = (cols["s"] == 1) & (cols["m"] == 0)
    treated = obs & (cols["z"] == 1)
    control = obs & (cols["z"] == 0)
    if not (treated.any() and control.any()):
        raise ValueError("need observed outcomes in both arms")
    return float(np.nanmean(cols["y"][treated]) - np.nanmean(cols["y"][control]))


def write_truth_manifest(truth: SimTruth, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_truth_manifest(path: str | Path) -> SimTruth:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    by_name = {g.value: g for g in STRATA_ORDER}
    config = SimConfig(
        n=payload["n"],
        seed=payload["seed"],
        p=payload["p"],
        covariate_corr=payload["covariate_corr"],
        beta=np.array(payload["beta"]),
        base_rate=payload["base_rate"],
        ps_degree=payload["ps_degree"],
        alpha={by_name[k]: np.array(v) for k, v in payload["alpha"].items()},
        eta={by_name[k]: np.array(v) for k, v in payload["eta"].items()},
        sigma2={by_name[k]: float(v) for k, v in payload["sigma2"].items()},
        mechanism=payload["mechanism"],
        theta={
            (by_name[k.split("_")[0]], int(k.split("_")[1])): np.array(v)
            for k, v in payload["theta"].items()
        },
        theta_arm={int(k): np.array(v) for k, v in payload["theta_arm"].items()},
        missing_rate=payload["missing_rate"],
        t_o=payload["t_o"],
        post_horizon_scale=payload["post_horizon_scale"],
    )
    return SimTruth(
        config=config,
        strata=tuple(by_name[k] for k in payload["strata"]),
        counts={k: int(v) for k, v in payload["counts"].items()},
    )


def reference_config(
    n: int, seed: int, mechanism: str = "latent", sace: float = 3.0, **overrides
) -> SimConfig:
    """Default moderate-confounding configuration used across the test suite."""
    eta = _default_eta()
    eta[PrincipalStratum.LL] = np.array([23.5, sace, 0.06, -1.2, 0.25])
    cfg = dict(n=n, seed=seed, mechanism=mechanism, eta=eta)
    cfg.update(overrides)
    return SimConfig(**cfg)


def confounded_config(n: int, seed: int, sace: float = 3.0, **overrides) -> SimConfig:
    """Strong score-driven confounding: the naive survivor contrast flips sign."""
    cfg = dict(
        n=n,
        seed=seed,
        beta=np.array([0.9, -0.7, 0.5]),
        alpha={
            PrincipalStratum.LL: np.array([0.2, -0.6, -0.1]),
            PrincipalStratum.LD: np.array([-0.3, 0.5, 0.0]),
            PrincipalStratum.DL: np.array([-0.6, -0.5, 0.0]),
        },
        eta={
            PrincipalStratum.LL: np.array([24.0, sace, 0.05, -2.0, 0.0]),
            PrincipalStratum.LD: np.array([20.0, -1.6, 0.0]),
            PrincipalStratum.DL: np.array([27.5, -1.6, 0.0]),
        },
        sigma2={
            PrincipalStratum.LL: 2.0,
            PrincipalStratum.LD: 2.5,
            PrincipalStratum.DL: 2.5,
        },
        mechanism="latent",
    )
    cfg.update(overrides)
    return SimConfig(**cfg)


def low_dl_config(n: int, seed: int, **overrides) -> SimConfig:
    """Near-monotone truth: the harmed stratum has probability below 0.05."""
    alpha = _default_alpha()
    alpha[PrincipalStratum.DL] = np.array([-2.8, -0.3, 0.0])
    cfg = dict(n=n, seed=seed, alpha=alpha)
    cfg.update(overrides)
    return SimConfig(**cfg)
