"""Subject records, the stratum/observed-group taxonomy, and dataset ingestion.

The on-disk contract is a UTF-8 CSV with header columns
``id, z, t_z, s, t_s, m, y`` followed by one column per baseline covariate.
``m`` is 0 (outcome observed), 1 (outcome missing) or the literal ``NA``
(undefined, required when ``s=0``); ``y`` is a real number or ``NA``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DataError",
    "MissingState",
    "PrincipalStratum",
    "ObservedGroup",
    "PatientRecord",
    "Dataset",
    "classify_observed_group",
    "feasible_strata",
    "load_csv",
    "write_csv",
    "standardize",
    "inverse_standardize",
    "impute_covariates",
]

RESERVED_COLUMNS = ("id", "z", "t_z", "s", "t_s", "m", "y")

# Tolerance for checking the treatment-time censoring rule on file input.
_TIME_RTOL = 1e-9
_TIME_ATOL = 1e-9


class DataError(ValueError):
    """Malformed input data: schema problems or invariant violations."""


class MissingState(Enum):
    """Outcome-missingness indicator: defined only for survivors."""

    OBSERVED = 0
    MISSING = 1
    UNDEFINED = None


class PrincipalStratum(Enum):
    """Latent joint survival class; first letter is the treated arm, second the untreated."""

    LL = "LL"
    LD = "LD"
    DL = "DL"
    DD = "DD"

    def survives(self, z: int) -> bool:
        """Survival status this stratum implies under arm ``z``."""
        letter = self.value[0] if z == 1 else self.value[1]
        return letter == "L"


class ObservedGroup(Enum):
    """Observable classification by (z, s, m); m collapses for the dead."""

    O110 = (1, 1, MissingState.OBSERVED)
    O111 = (1, 1, MissingState.MISSING)
    O10x = (1, 0, MissingState.UNDEFINED)
    O010 = (0, 1, MissingState.OBSERVED)
    O011 = (0, 1, MissingState.MISSING)
    O00x = (0, 0, MissingState.UNDEFINED)

    @property
    def z(self) -> int:
        return self.value[0]

    @property
    def s(self) -> int:
        return self.value[1]


# Strata compatible with each observed group (survival letters must match the
# realized arm); DL is additionally removed under monotonicity.
_FEASIBLE: dict[ObservedGroup, tuple[PrincipalStratum, ...]] = {
    ObservedGroup.O110: (PrincipalStratum.LL, PrincipalStratum.LD),
    ObservedGroup.O111: (PrincipalStratum.LL, PrincipalStratum.LD),
    ObservedGroup.O10x: (PrincipalStratum.DL, PrincipalStratum.DD),
    ObservedGroup.O010: (PrincipalStratum.LL, PrincipalStratum.DL),
    ObservedGroup.O011: (PrincipalStratum.LL, PrincipalStratum.DL),
    ObservedGroup.O00x: (PrincipalStratum.LD, PrincipalStratum.DD),
}


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One subject: treatment timing, survival, missingness flag, and outcome.

    ``y`` is present iff the subject is alive at the horizon and the outcome
    was measured; ``m`` is UNDEFINED exactly for subjects dead at the horizon.
    """

    id: str
    z: int
    t_z: float
    s: int
    t_s: float
    m: MissingState
    y: float | None
    covariates: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.z == other.z
            and self.t_z == other.t_z
            and self.s == other.s
            and self.t_s == other.t_s
            and self.m is other.m
            and self.y == other.y
            and np.array_equal(self.covariates, other.covariates)
        )

    def __post_init__(self) -> None:
        if self.z not in (0, 1):
            raise DataError(f"record {self.id!r}: z must be 0 or 1, got {self.z!r}")
        if self.s not in (0, 1):
            raise DataError(f"record {self.id!r}: s must be 0 or 1, got {self.s!r}")
        if not (math.isfinite(self.t_s) and self.t_s > 0):
            raise DataError(f"record {self.id!r}: t_s must be positive and finite")
        if not (math.isfinite(self.t_z) and self.t_z > 0):
            raise DataError(f"record {self.id!r}: t_z must be positive and finite")
        if self.s == 0:
            if self.m is not MissingState.UNDEFINED:
                raise DataError(
                    f"record {self.id!r}: m must be undefined when s=0 (censoring by death)"
                )
            if self.y is not None:
                raise DataError(
                    f"record {self.id!r}: outcome defined despite censoring by death"
                )
        else:
            if self.m is MissingState.UNDEFINED:
                raise DataError(f"record {self.id!r}: m must be 0 or 1 for survivors")
            if self.m is MissingState.OBSERVED and (
                self.y is None or not math.isfinite(self.y)
            ):
                raise DataError(f"record {self.id!r}: m=0 requires a finite outcome y")
            if self.m is MissingState.MISSING and self.y is not None:
                raise DataError(f"record {self.id!r}: y must be absent when m=1")
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 1:
            raise DataError(f"record {self.id!r}: covariates must be a flat vector")
        object.__setattr__(self, "covariates", cov)

    def check_treatment_time(self, t_o: float) -> None:
        """Enforce the censoring rule linking t_z to t_s at horizon ``t_o``."""
        if self.z == 0:
            expected = min(self.t_s, t_o)
            if not math.isclose(self.t_z, expected, rel_tol=_TIME_RTOL, abs_tol=_TIME_ATOL):
                raise DataError(
                    f"record {self.id!r}: untreated subjects must have "
                    f"t_z = min(t_s, t_o) = {expected}, got {self.t_z}"
                )
        else:
            bound = min(self.t_s, t_o)
            if self.t_z > bound * (1 + _TIME_RTOL) + _TIME_ATOL:
                raise DataError(
                    f"record {self.id!r}: treated subjects need t_z <= min(t_s, t_o)"
                    f" = {bound}, got {self.t_z}"
                )


def classify_observed_group(record: PatientRecord) -> ObservedGroup:
    """Deterministic (z, s, m) -> observed-group mapping."""
    key = (record.z, record.s, record.m if record.s == 1 else MissingState.UNDEFINED)
    return ObservedGroup(key)


def feasible_strata(
    group: ObservedGroup, monotonicity: bool = False
) -> tuple[PrincipalStratum, ...]:
    """Strata a member of ``group`` may occupy; DL is dropped under monotonicity."""
    strata = _FEASIBLE[group]
    if monotonicity:
        strata = tuple(g for g in strata if g is not PrincipalStratum.DL)
    return strata


@dataclass
class Dataset:
    """Immutable-by-convention collection of validated records.

    ``standardization`` holds the (mean, sd) used by the most recent
    :func:`standardize` call for each transformed column, enabling an exact
    inverse transform.
    """

    records: tuple[PatientRecord, ...]
    t_o: float = 18.0
    covariate_names: tuple[str, ...] = ()
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.records = tuple(self.records)
        self.covariate_names = tuple(self.covariate_names)
        if self.t_o <= 0:
            raise DataError("t_o must be positive")
        p = len(self.covariate_names)
        for rec in self.records:
            if rec.covariates.shape != (p,):
                raise DataError(
                    f"record {rec.id!r}: expected {p} covariates, got {rec.covariates.shape[0]}"
                )
            rec.check_treatment_time(self.t_o)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        idx = self.covariate_names.index(name)
        return np.array([rec.covariates[idx] for rec in self.records])

    def covariate_matrix(self) -> np.ndarray:
        if not self.records:
            return np.empty((0, len(self.covariate_names)))
        return np.vstack([rec.covariates for rec in self.records])

    def arrays(self) -> dict[str, np.ndarray]:
        """Columnar view used by the numeric layers."""
        n = len(self.records)
        out = {
            "z": np.array([r.z for r in self.records], dtype=int),
            "s": np.array([r.s for r in self.records], dtype=int),
            "t_z": np.array([r.t_z for r in self.records], dtype=float),
            "t_s": np.array([r.t_s for r in self.records], dtype=float),
            "y": np.array(
                [r.y if r.y is not None else np.nan for r in self.records], dtype=float
            ),
            "m": np.array(
                [r.m.value if r.m.value is not None else -1 for r in self.records],
                dtype=int,
            ),
            "X": self.covariate_matrix(),
        }
        assert out["X"].shape == (n, len(self.covariate_names))
        return out


def _parse_real(token: str, row: int, col: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} is not a number: {token!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: column {col!r} must be finite, got {token!r}")
    return value


def _parse_optional_real(token: str, row: int, col: str) -> float | None:
    if token == "NA":
        return None
    return _parse_real(token, row, col)


def _parse_binary(token: str, row: int, col: str) -> int:
    if token not in ("0", "1"):
        raise DataError(f"row {row}: column {col!r} must be 0 or 1, got {token!r}")
    return int(token)


def load_csv(
    path: str | Path,
    t_o: float = 18.0,
    schema: Mapping[str, str] | None = None,
    covariates: Sequence[str] | None = None,
) -> Dataset:
    """Read and validate the CSV contract.

    ``schema`` maps canonical column names to the file's column names when the
    header deviates; ``covariates`` restricts which extra columns are used
    (default: every non-reserved column, in header order). Covariate cells may
    be ``NA``; fill them with :func:`impute_covariates` before modeling.
    """
    path = Path(path)
    rename = dict(schema) if schema else {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        colmap = {}
        for canon in RESERVED_COLUMNS:
            actual = rename.get(canon, canon)
            if actual not in header:
                raise DataError(f"{path}: missing required column {actual!r}")
            colmap[canon] = header.index(actual)
        reserved_actual = {rename.get(c, c) for c in RESERVED_COLUMNS}
        if covariates is None:
            cov_names = tuple(c for c in header if c not in reserved_actual)
        else:
            for c in covariates:
                if c not in header:
                    raise DataError(f"{path}: missing covariate column {c!r}")
            cov_names = tuple(covariates)
        cov_idx = [header.index(c) for c in cov_names]

        records = []
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataError(
                    f"row {rownum}: expected {len(header)} fields, got {len(row)}"
                )
            rid = row[colmap["id"]]
            z = _parse_binary(row[colmap["z"]], rownum, "z")
            s = _parse_binary(row[colmap["s"]], rownum, "s")
            t_z = _parse_real(row[colmap["t_z"]], rownum, "t_z")
            t_s = _parse_real(row[colmap["t_s"]], rownum, "t_s")
            m_tok = row[colmap["m"]]
            y = _parse_optional_real(row[colmap["y"]], rownum, "y")
            if s == 0:
                if m_tok != "NA":
                    raise DataError(f"row {rownum}: m must be NA when s=0, got {m_tok!r}")
                m = MissingState.UNDEFINED
                if y is not None:
                    raise DataError(
                        f"row {rownum}: outcome defined despite censoring by death"
                    )
            else:
                if m_tok not in ("0", "1"):
                    raise DataError(
                        f"row {rownum}: m must be 0 or 1 when s=1, got {m_tok!r}"
                    )
                m = MissingState(int(m_tok))
            cov = np.array(
                [
                    np.nan if row[j] == "NA" else _parse_real(row[j], rownum, header[j])
                    for j in cov_idx
                ],
                dtype=float,
            )
            try:
                rec = PatientRecord(rid, z, t_z, s, t_s, m, y, cov)
                rec.check_treatment_time(t_o)
            except DataError as exc:
                raise DataError(f"row {rownum}: {exc}") from None
            records.append(rec)
    return Dataset(tuple(records), t_o=t_o, covariate_names=cov_names)


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    return repr(float(value))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Emit the exact CSV contract (round-trips through :func:`load_csv`)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(RESERVED_COLUMNS) + list(dataset.covariate_names))
        for rec in dataset.records:
            m_tok = "NA" if rec.m is MissingState.UNDEFINED else str(rec.m.value)
            writer.writerow(
                [
                    rec.id,
                    str(rec.z),
                    _fmt(rec.t_z),
                    str(rec.s),
                    _fmt(rec.t_s),
                    m_tok,
                    _fmt(rec.y),
                ]
                + [_fmt(v) for v in rec.covariates]
            )


def _replace_covariates(dataset: Dataset, matrix: np.ndarray) -> tuple[PatientRecord, ...]:
    return tuple(
        replace(rec, covariates=matrix[i]) for i, rec in enumerate(dataset.records)
    )


def standardize(dataset: Dataset, columns: Sequence[str]) -> Dataset:
    """Center and scale the named covariate columns to sample mean 0, sd 1.

    Sample sd uses the n-1 denominator. NaN cells are ignored when computing
    the moments and stay NaN. The applied (mean, sd) are recorded so
    :func:`inverse_standardize` is exact.
    """
    matrix = dataset.covariate_matrix().copy()
    scales = dict(dataset.standardization)
    for name in columns:
        if name not in dataset.covariate_names:
            raise DataError(f"unknown covariate column {name!r}")
        j = dataset.covariate_names.index(name)
        col = matrix[:, j]
        obs = col[~np.isnan(col)]
        if obs.size < 2:
            raise DataError(f"column {name!r}: need at least 2 observed values")
        mean = float(np.mean(obs))
        sd = float(np.std(obs, ddof=1))
        if sd == 0.0:
            raise DataError(f"column {name!r} has zero variance; cannot standardize")
        matrix[:, j] = (col - mean) / sd
        scales[name] = (mean, sd)
        post = matrix[:, j][~np.isnan(matrix[:, j])]
        assert abs(np.mean(post)) < 1e-9 and abs(np.std(post, ddof=1) - 1.0) < 1e-9
    return Dataset(
        _replace_covariates(dataset, matrix),
        t_o=dataset.t_o,
        covariate_names=dataset.covariate_names,
        standardization=scales,
    )


def inverse_standardize(dataset: Dataset) -> Dataset:
    """Undo the recorded standardization exactly."""
    matrix = dataset.covariate_matrix().copy()
    for name, (mean, sd) in dataset.standardization.items():
        j = dataset.covariate_names.index(name)
        matrix[:, j] = matrix[:, j] * sd + mean
    return Dataset(
        _replace_covariates(dataset, matrix),
        t_o=dataset.t_o,
        covariate_names=dataset.covariate_names,
        standardization={},
    )


def _is_categorical(values: np.ndarray) -> bool:
    # only 0/1 indicator columns get mode imputation; a fractional fill would
    # break their coding, while integer-looking scales still want the mean
    return bool(np.all(np.isin(values, (0.0, 1.0))))


def impute_covariates(dataset: Dataset) -> tuple[Dataset, dict[str, int]]:
    """Fill missing covariate cells: column mean, or mode for 0/1 indicators.

    Returns the completed dataset and a per-column count of imputed cells.
    """
    matrix = dataset.covariate_matrix().copy()
    report: dict[str, int] = {}
    for j, name in enumerate(dataset.covariate_names):
        col = matrix[:, j]
        missing = np.isnan(col)
        report[name] = int(missing.sum())
        if not missing.any():
            continue
        obs = col[~missing]
        if obs.size == 0:
            raise DataError(f"column {name!r} has no observed values to impute from")
        if _is_categorical(obs):
            values, counts = np.unique(obs, return_counts=True)
            fill = float(values[np.argmax(counts)])  # ties resolve to the smallest value
        else:
            fill = float(np.mean(obs))
        col[missing] = fill
    if not all(
        np.all(np.isfinite(matrix[:, j])) for j in range(len(dataset.covariate_names))
    ):
        raise DataError("non-finite covariates remain after imputation")
    completed = Dataset(
        _replace_covariates(dataset, matrix),
        t_o=dataset.t_o,
        covariate_names=dataset.covariate_names,
        standardization=dict(dataset.standardization),
    )
    return completed, report
