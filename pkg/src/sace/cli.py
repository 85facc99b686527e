"""Batch command-line interface: simulate, fit, dic-scan, summarize.

Exit codes: 0 success, 2 validation/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cox import write_propensity_csv
from .data import DataError, load_csv, write_csv
from .diagnostics import (
    summarize,
    summary_csv_string,
    write_summary_csv,
    write_summary_text,
)
from .estimator import SaceEstimator, dic_scan
from .likelihood import MODES
from .sampler import NumericalError, read_draws_csv, write_draws_csv
from .simulate import (
    confounded_config,
    low_dl_config,
    reference_config,
    simulate,
    write_truth_manifest,
)

_PRESETS = {
    "reference": reference_config,
    "confounded": confounded_config,
    "low-dl": low_dl_config,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, payload: dict) -> None:
    (out / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8",
    )


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Start from hard defaults, apply --config file values, then explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"--config {args.config}: invalid JSON ({exc})") from None
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise DataError(f"--config {args.config}: unknown keys {sorted(unknown)}")
        merged.update(file_values)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


_FIT_DEFAULTS = {
    "mode": "latent",
    "ps_degree": 2,
    "monotonicity": False,
    "iters": 5000,
    "burnin": 3000,
    "thin": 1,
    "chains": 1,
    "seed": 0,
    "t_o": 18.0,
    "prior_nu": 0.01,
    "prior_omega": 0.01,
    "prior_v_scale": 100.0,
    "prior_alpha_sd": 10.0,
    "prior_theta_sd": 10.0,
    "allow_nonconverged": False,
    "export_ps": False,
}


def _add_fit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="input data CSV")
    parser.add_argument("--mode", choices=MODES, default=None)
    parser.add_argument("--ps-degree", dest="ps_degree", type=int, default=None)
    parser.add_argument(
        "--monotonicity", action="store_const", const=True, default=None
    )
    parser.add_argument("--iters", type=int, default=None)
    parser.add_argument("--burnin", type=int, default=None)
    parser.add_argument("--thin", type=int, default=None)
    parser.add_argument("--chains", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--t-o", dest="t_o", type=float, default=None)
    parser.add_argument("--prior-nu", dest="prior_nu", type=float, default=None)
    parser.add_argument("--prior-omega", dest="prior_omega", type=float, default=None)
    parser.add_argument("--prior-v-scale", dest="prior_v_scale", type=float, default=None)
    parser.add_argument("--prior-alpha-sd", dest="prior_alpha_sd", type=float, default=None)
    parser.add_argument("--prior-theta-sd", dest="prior_theta_sd", type=float, default=None)
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--out", required=True, help="output directory")


def _fit_estimator(settings: dict, n_jobs: int = 1) -> SaceEstimator:
    return SaceEstimator(
        mode=settings["mode"],
        ps_degree=settings["ps_degree"],
        monotonicity=settings["monotonicity"],
        iterations=settings["iters"],
        burn_in=settings["burnin"],
        thin=settings["thin"],
        chains=settings["chains"],
        seed=settings["seed"],
        prior_nu=settings["prior_nu"],
        prior_omega=settings["prior_omega"],
        prior_v_scale=settings["prior_v_scale"],
        prior_alpha_sd=settings["prior_alpha_sd"],
        prior_theta_sd=settings["prior_theta_sd"],
        allow_nonconverged_cox=settings["allow_nonconverged"],
        t_o=settings["t_o"],
        n_jobs=n_jobs,
    )


def cmd_fit(args: argparse.Namespace) -> int:
    settings = _merge_config(args, _FIT_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    clocks: dict[str, float] = {}

    t0 = time.perf_counter()
    dataset = load_csv(data_path, t_o=settings["t_o"])
    clocks["load"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    est = _fit_estimator(settings, n_jobs=min(settings["chains"], args.jobs)).fit(dataset)
    clocks["fit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    write_draws_csv(est.samples_, out / "draws.csv")
    write_summary_csv(est.summary_, out / "summary.csv")
    write_summary_text(est.summary_, out / "summary.txt")
    if settings["export_ps"]:
        write_propensity_csv(out / "ps.csv", est.design_.ids, est.ps_)
    clocks["write"] = time.perf_counter() - t0

    convergence = {
        "cox_converged": est.cox_.converged_,
        "cox_iterations": est.cox_.n_iter_,
        "cox_loglik": est.cox_.loglik_,
        "cox_message": est.cox_.result_.message,
    }
    if settings["chains"] >= 2:
        convergence["gelman_rubin_sace"] = est.gelman_rubin()
    _write_manifest(
        out,
        {
            "version": __version__,
            "command": "fit",
            "settings": settings,
            "data_path": str(data_path),
            "data_sha256": _sha256(data_path),
            "n_records": dataset.n,
            "draw_count": est.samples_.n_draws,
            "acceptance_rates": est.acceptance_rates_,
            "convergence": convergence,
            "imputation_report": est.imputation_report_,
            "standardized_columns": list(est.standardized_columns_),
            "sace_mean": est.sace_mean_,
            "sace_interval": list(est.sace_interval_),
            "wall_clock_seconds": clocks,
        },
    )
    print(f"SACE posterior mean {est.sace_mean_:.4f}, "
          f"95% CI ({est.sace_interval_[0]:.4f}, {est.sace_interval_[1]:.4f})")
    print(f"outputs written to {out}")
    return 0


def _parse_degrees(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        lo, hi = text.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(tok) for tok in text.split(","))


def cmd_dic_scan(args: argparse.Namespace) -> int:
    settings = _merge_config(args, _FIT_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_path = Path(args.data)
    dataset = load_csv(data_path, t_o=settings["t_o"])
    modes = tuple(tok.strip() for tok in args.modes.split(","))
    degrees = _parse_degrees(args.degrees)

    t0 = time.perf_counter()
    result = dic_scan(
        dataset,
        modes=modes,
        degrees=degrees,
        focus=args.focus,
        n_jobs=args.jobs,
        monotonicity=settings["monotonicity"],
        iterations=settings["iters"],
        burn_in=settings["burnin"],
        thin=settings["thin"],
        seed=settings["seed"],
        prior_nu=settings["prior_nu"],
        prior_omega=settings["prior_omega"],
        prior_v_scale=settings["prior_v_scale"],
        prior_alpha_sd=settings["prior_alpha_sd"],
        prior_theta_sd=settings["prior_theta_sd"],
        allow_nonconverged_cox=settings["allow_nonconverged"],
        t_o=settings["t_o"],
    )
    elapsed = time.perf_counter() - t0

    with (out / "dic_scan.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode"] + [str(d) for d in degrees] + ["row_min_d"])
        for i, mode in enumerate(result.modes):
            cells = [
                "NA" if np.isnan(v) else f"{v:.6f}" for v in result.table[i]
            ]
            row_min = result.row_minimum(mode)
            writer.writerow([mode] + cells + ["NA" if row_min is None else str(row_min)])

    global_min = result.global_minimum()
    lines = [f"DIC scan (focus={result.focus}); * row minimum, ** global minimum"]
    header = ["mode"] + [f"d={d}" for d in degrees]
    rows = [header]
    for i, mode in enumerate(result.modes):
        row_min = result.row_minimum(mode)
        cells = [mode]
        for j, d in enumerate(degrees):
            v = result.table[i, j]
            if np.isnan(v):
                cells.append("failed")
                continue
            mark = ""
            if global_min == (mode, d):
                mark = "**"
            elif row_min == d:
                mark = "*"
            cells.append(f"{v:.2f}{mark}")
        rows.append(cells)
    widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
    for r in rows:
        lines.append("  ".join(c.rjust(widths[j]) for j, c in enumerate(r)))
    (out / "dic_scan.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    _write_manifest(
        out,
        {
            "version": __version__,
            "command": "dic-scan",
            "settings": settings,
            "modes": list(modes),
            "degrees": list(degrees),
            "focus": result.focus,
            "data_path": str(data_path),
            "data_sha256": _sha256(data_path),
            "global_minimum": list(global_min) if global_min else None,
            "failed_cells": {f"{m}:{d}": err for (m, d), err in result.errors.items()},
            "wall_clock_seconds": {"scan": elapsed},
        },
    )
    print((out / "dic_scan.txt").read_text(encoding="utf-8"))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preset = _PRESETS[args.preset]
    kwargs = {"n": args.n, "seed": args.seed}
    if args.preset != "low-dl":
        kwargs["sace"] = args.sace
    if args.preset == "reference":
        kwargs["mechanism"] = args.mechanism
    config = preset(**kwargs)
    if args.t_o is not None:
        config.t_o = args.t_o
    dataset, truth = simulate(config)
    write_csv(dataset, out / "data.csv")
    write_truth_manifest(truth, out / "truth.json")
    _write_manifest(
        out,
        {
            "version": __version__,
            "command": "simulate",
            "preset": args.preset,
            "n": args.n,
            "seed": args.seed,
            "mechanism": config.mechanism,
            "true_sace": truth.true_sace,
            "stratum_counts": truth.counts,
            "data_sha256": _sha256(out / "data.csv"),
        },
    )
    print(f"simulated {dataset.n} records (true SACE {truth.true_sace}) into {out}")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    samples = read_draws_csv(args.draws)
    summary = summarize(samples)
    if args.param:
        rows = tuple(
            r for r in summary.rows if r.name == args.param or r.label == args.param
        )
        if not rows:
            raise DataError(f"no parameter named {args.param!r} in the draws")
        summary = type(summary)(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_summary_csv(summary, out / "summary.csv")
        write_summary_text(summary, out / "summary.txt")
        print(f"summary written to {out}")
    else:
        sys.stdout.write(summary_csv_string(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sace",
        description="Survivor average causal effect estimation with censoring by death",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--preset", choices=sorted(_PRESETS), default="reference")
    p_sim.add_argument("--mechanism", choices=MODES, default="latent")
    p_sim.add_argument("--sace", type=float, default=3.0)
    p_sim.add_argument("--t-o", dest="t_o", type=float, default=None)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="run the full estimation pipeline")
    _add_fit_flags(p_fit)
    p_fit.add_argument(
        "--allow-nonconverged",
        dest="allow_nonconverged",
        action="store_const",
        const=True,
        default=None,
        help="continue despite a non-convergent treatment-time model",
    )
    p_fit.add_argument(
        "--export-ps", dest="export_ps", action="store_const", const=True, default=None
    )
    p_fit.add_argument("--jobs", type=int, default=1, help="parallel chains")
    p_fit.set_defaults(func=cmd_fit)

    p_scan = sub.add_parser("dic-scan", help="DIC grid over modes and basis degrees")
    _add_fit_flags(p_scan)
    p_scan.add_argument("--modes", default=",".join(MODES))
    p_scan.add_argument("--degrees", default="0-5", help="e.g. 0-5 or 0,2,4")
    p_scan.add_argument("--focus", choices=("outcome", "joint"), default="outcome")
    p_scan.add_argument(
        "--allow-nonconverged",
        dest="allow_nonconverged",
        action="store_const",
        const=True,
        default=None,
    )
    p_scan.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    p_scan.set_defaults(func=cmd_dic_scan)

    p_sum = sub.add_parser("summarize", help="re-derive the summary from a draw log")
    p_sum.add_argument("--draws", required=True)
    p_sum.add_argument("--param", default=None, help="single parameter name or label")
    p_sum.add_argument("--out", default=None)
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
