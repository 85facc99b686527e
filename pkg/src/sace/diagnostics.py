"""Posterior summaries, DIC, and convergence diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .likelihood import (
    ModelDesign,
    check_mode,
    observed_data_loglik,
    outcome_conditional_loglik,
)
from .sampler import SACE_PARAM, TREATMENT_TIME_PARAM, PosteriorSamples

__all__ = [
    "ParameterSummary",
    "PosteriorSummary",
    "summarize",
    "effective_sample_size",
    "gelman_rubin",
    "DicResult",
    "compute_dic",
    "write_summary_csv",
    "write_summary_text",
]

_LABELS = {SACE_PARAM: "sace", TREATMENT_TIME_PARAM: "time_to_treatment"}


@dataclass(frozen=True)
class ParameterSummary:
    name: str
    label: str
    mean: float
    sd: float
    ci_lower: float
    ci_upper: float
    ess: float


@dataclass
class PosteriorSummary:
    """Per-parameter posterior table with the effect rows labelled."""

    rows: tuple[ParameterSummary, ...]

    def __getitem__(self, name: str) -> ParameterSummary:
        for row in self.rows:
            if row.name == name or row.label == name:
                return row
        raise KeyError(f"no summary row for {name!r}")

    @property
    def sace(self) -> ParameterSummary:
        return self[SACE_PARAM]


def autocorrelations(x: np.ndarray) -> np.ndarray:
    """Sample autocorrelation function via FFT, lags 0..n-1."""
    x = np.asarray(x, dtype=float)
    n = x.size
    centered = x - x.mean()
    peak = np.max(np.abs(centered))
    if peak > 0:  # scale-invariant; keeps the FFT finite for huge draws
        centered = centered / peak
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, size)
    acov = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n].real / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """ESS with the autocorrelation sum truncated at the first non-positive
    adjacent-pair sum (initial positive sequence)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2 or np.min(x) == np.max(x):
        return float(n)
    rho = autocorrelations(x)
    total = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0:
            break
        total += pair
        k += 1
    tau = max(1.0, 2.0 * total - 1.0)
    return float(min(n, n / tau))


def summarize(samples: PosteriorSamples) -> PosteriorSummary:
    """Means, sds, equal-tailed 95% intervals, and per-chain-summed ESS."""
    if samples.n_draws < 2:
        raise ValueError("need at least two draws to summarize")
    pooled = samples.matrix()
    rows = []
    for j, name in enumerate(samples.names):
        col = pooled[:, j]
        mean = float(np.mean(col))
        sd = float(np.std(col, ddof=1))
        lo, hi = (float(q) for q in np.percentile(col, [2.5, 97.5]))
        ess = float(
            sum(effective_sample_size(chain[:, j]) for chain in samples.chains)
        )
        rows.append(
            ParameterSummary(
                name=name,
                label=_LABELS.get(name, ""),
                mean=mean,
                sd=sd,
                ci_lower=lo,
                ci_upper=hi,
                ess=ess,
            )
        )
    return PosteriorSummary(tuple(rows))


def gelman_rubin(chains: Sequence[np.ndarray]) -> float:
    """Potential scale reduction factor across chains of equal length."""
    if len(chains) < 2:
        raise ValueError("need at least two chains")
    arrays = [np.asarray(c, dtype=float) for c in chains]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ValueError("chains must have equal length")
    n = lengths.pop()
    if n < 2:
        raise ValueError("chains are too short")
    means = np.array([a.mean() for a in arrays])
    variances = np.array([a.var(ddof=1) for a in arrays])
    w = float(variances.mean())
    b_over_n = float(means.var(ddof=1))
    if w == 0.0:
        return 1.0 if b_over_n == 0.0 else np.inf
    v_hat = (n - 1) / n * w + b_over_n
    return float(np.sqrt(v_hat / w))


@dataclass(frozen=True)
class DicResult:
    """Deviance information criterion pieces: dic = dbar + p_d."""

    dbar: float
    d_at_mean: float
    p_d: float
    dic: float
    focus: str = "joint"

    def __post_init__(self) -> None:
        assert abs(self.p_d - (self.dbar - self.d_at_mean)) < 1e-9
        assert abs(self.dic - (self.dbar + self.p_d)) < 1e-9


def compute_dic(
    samples: PosteriorSamples,
    design: ModelDesign,
    mode: str = "latent",
    focus: str = "joint",
) -> DicResult:
    """Mean deviance plus effective parameter count.

    ``focus="joint"`` scores the full observed-data likelihood of the mode
    (latent strata marginalized out). ``focus="outcome"`` scores only the
    observed outcomes conditionally on group membership and retention, which
    keeps values comparable across missingness modes; cross-mode scans use it.
    The plug-in deviance is evaluated at the componentwise posterior mean on
    natural scales.
    """
    check_mode(mode)
    if focus not in ("joint", "outcome"):
        raise ValueError(f"focus must be 'joint' or 'outcome', got {focus!r}")
    if samples.layout is None:
        raise ValueError("samples lack a parameter layout; rerun the fit to get DIC")
    if mode == "mcar":
        design = design.complete_cases()
    loglik = observed_data_loglik if focus == "joint" else outcome_conditional_loglik

    matrix = samples.matrix()
    deviances = np.empty(matrix.shape[0])
    for k in range(matrix.shape[0]):
        params = samples.layout.unpack(matrix[k])
        deviances[k] = -2.0 * loglik(design, params, mode)
        if not np.isfinite(deviances[k]):
            raise FloatingPointError(f"non-finite deviance at draw {k}")
    dbar = float(deviances.mean())
    at_mean = samples.layout.unpack(matrix.mean(axis=0))
    d_at_mean = -2.0 * loglik(design, at_mean, mode)
    if not np.isfinite(d_at_mean):
        raise FloatingPointError("non-finite deviance at the posterior mean")
    p_d = dbar - d_at_mean
    return DicResult(dbar=dbar, d_at_mean=d_at_mean, p_d=p_d, dic=dbar + p_d, focus=focus)


def _fmt(value: float) -> str:
    return f"{value:.10g}"


def write_summary_csv(summary: PosteriorSummary, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_summary(summary, fh)


def summary_csv_string(summary: PosteriorSummary) -> str:
    buf = io.StringIO()
    _write_summary(summary, buf)
    return buf.getvalue()


def _write_summary(summary: PosteriorSummary, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["parameter", "label", "mean", "sd", "ci_2.5", "ci_97.5", "ess"])
    for row in summary.rows:
        writer.writerow(
            [
                row.name,
                row.label,
                _fmt(row.mean),
                _fmt(row.sd),
                _fmt(row.ci_lower),
                _fmt(row.ci_upper),
                _fmt(row.ess),
            ]
        )


def write_summary_text(summary: PosteriorSummary, path: str | Path) -> None:
    """Aligned plain-text rendering of the summary table."""
    header = ["parameter", "label", "mean", "sd", "ci_2.5", "ci_97.5", "ess"]
    table = [header]
    for row in summary.rows:
        table.append(
            [
                row.name,
                row.label,
                _fmt(row.mean),
                _fmt(row.sd),
                _fmt(row.ci_lower),
                _fmt(row.ci_upper),
                _fmt(row.ess),
            ]
        )
    widths = [max(len(r[j]) for r in table) for j in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip()
        for row in table
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
