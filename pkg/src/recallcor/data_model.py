"""Core domain types and CSV ingestion for case-control data with recall bias.

The central objects are:

  * CaseControlData -- immutable individual-level records (binary outcome,
    binary *reported* exposure, numeric covariates, optional stratum label).
  * RecallBias -- direction of exposure misreporting plus the two
    misreporting probabilities (one for cases, one for controls).
  * EstimateResult -- a point estimate of the marginal causal odds ratio on
    the log scale with optional bootstrap inference attached.

Everything downstream (ML estimation, stratification, sensitivity scans)
consumes these types.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class ValidationError(Exception):
    """Input data violates the documented schema or type invariants."""


class MissingColumn(ValidationError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"required column {column!r} not found in header")


class NonBinaryOutcome(ValidationError):
    def __init__(self, row: int, value):
        self.row = row
        super().__init__(f"outcome must be 0 or 1, got {value!r} in data row {row}")


class NonBinaryExposure(ValidationError):
    def __init__(self, row: int, value):
        self.row = row
        super().__init__(f"exposure must be 0 or 1, got {value!r} in data row {row}")


class RaggedRow(ValidationError):
    def __init__(self, row: int, expected: int, got: int):
        self.row = row
        super().__init__(f"data row {row} has {got} fields, header has {expected}")


class EstimationError(Exception):
    """Base class for estimator failures (as opposed to bad input data)."""


class DegenerateData(EstimationError):
    """Data cannot support the requested estimator (e.g. constant outcome)."""


class BiasDirection(str, Enum):
    OVER_REPORTING = "over"
    UNDER_REPORTING = "under"
    NONE = "none"


@dataclass(frozen=True)
class RecallBias:
    """Differential exposure-misreporting model.

    ``theta_case`` and ``theta_control`` are the probabilities that a truly
    unexposed case/control reports exposure (over-reporting), or that a truly
    exposed case/control denies it (under-reporting).  Both must lie in
    [0, 1).  ``direction=NONE`` forces both to zero.
    """

    direction: BiasDirection
    theta_case: float = 0.0
    theta_control: float = 0.0

    def __post_init__(self):
        for name in ("theta_case", "theta_control"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValidationError(f"{name} must lie in [0, 1), got {v}")
        if self.direction == BiasDirection.NONE and (
            self.theta_case != 0.0 or self.theta_control != 0.0
        ):
            raise ValidationError("direction 'none' requires both rates to be 0")

    @classmethod
    def none(cls) -> "RecallBias":
        return cls(BiasDirection.NONE)

    @classmethod
    def over_reporting(cls, theta_control: float, theta_case: float) -> "RecallBias":
        """Unexposed subjects report exposure at the given control/case rates."""
        return cls(BiasDirection.OVER_REPORTING, theta_case, theta_control)

    @classmethod
    def under_reporting(cls, theta_control: float, theta_case: float) -> "RecallBias":
        """Exposed subjects deny exposure at the given control/case rates."""
        return cls(BiasDirection.UNDER_REPORTING, theta_case, theta_control)

    @property
    def is_none(self) -> bool:
        return self.direction == BiasDirection.NONE or (
            self.theta_case == 0.0 and self.theta_control == 0.0
        )

    def as_dict(self) -> dict:
        return {
            "direction": self.direction.value,
            "theta_control": self.theta_control,
            "theta_case": self.theta_case,
        }


class Method(str, Enum):
    CRUDE = "crude"
    ML = "ml"
    STRAT_PROPENSITY = "strat-propensity"
    STRAT_PROGNOSTIC = "strat-prognostic"
    STRAT_USER = "strat-user"
    MANTEL_HAENSZEL = "mh"


@dataclass(frozen=True)
class CaseControlData:
    """Validated, immutable case-control dataset.

    Attributes
    ----------
    y : (n,) int array of binary outcomes (1 = case).
    t_star : (n,) int array of binary *reported* exposures.
    x : (n, p) float array of numeric covariates (p may be 0).
    stratum_id : optional (n,) int array of user-supplied stratum labels.
        Absent means a single stratum (unmatched design).
    """

    y: np.ndarray
    t_star: np.ndarray
    x: np.ndarray
    stratum_id: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64).copy()
        t = np.asarray(self.t_star, dtype=np.int64).copy()
        x = np.asarray(self.x, dtype=np.float64).copy()
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2:
            raise ValidationError("covariates must form a 2-D array")
        n = y.shape[0]
        if n < 1:
            raise ValidationError("dataset must contain at least one record")
        if t.shape[0] != n or x.shape[0] != n:
            raise ValidationError("outcome, exposure and covariates disagree on n")
        if not np.isin(y, (0, 1)).all():
            raise ValidationError("outcome values must all be 0 or 1")
        if not np.isin(t, (0, 1)).all():
            raise ValidationError("reported exposure values must all be 0 or 1")
        if not np.isfinite(x).all():
            raise ValidationError("covariates must be finite (missing values not permitted)")
        sid = self.stratum_id
        if sid is not None:
            sid = np.asarray(sid, dtype=np.int64).copy()
            if sid.shape[0] != n:
                raise ValidationError("stratum_id length must match n")
            sid.setflags(write=False)
        for a in (y, t, x):
            a.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t_star", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "stratum_id", sid)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def strata_labels(self) -> np.ndarray:
        """Dense stratum labels 0..K-1 (all zeros when no labels supplied)."""
        if self.stratum_id is None:
            return np.zeros(self.n, dtype=np.int64)
        _, labels = np.unique(self.stratum_id, return_inverse=True)
        return labels

    def require_estimable(self) -> None:
        """Raise DegenerateData unless both outcome classes are present."""
        if self.y.min() == self.y.max():
            raise DegenerateData("both outcome classes must be present")

    def subset(self, idx: np.ndarray) -> "CaseControlData":
        sid = None if self.stratum_id is None else self.stratum_id[idx]
        return CaseControlData(self.y[idx], self.t_star[idx], self.x[idx], sid)


@dataclass(frozen=True)
class EstimateResult:
    """Marginal causal odds-ratio estimate on the log scale.

    ``ci_low``/``ci_high`` are on the odds-ratio scale. ``diagnostics`` is a
    flat map of named reals (iteration counts, stratum counts, flags).
    """

    log_psi: float
    method: Method
    bias: RecallBias
    se_log_psi: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def psi(self) -> float:
        return math.exp(self.log_psi)

    def with_inference(self, se: float, ci_low: float, ci_high: float,
                       extra_diagnostics: dict | None = None) -> "EstimateResult":
        diag = dict(self.diagnostics)
        if extra_diagnostics:
            diag.update(extra_diagnostics)
        return dataclasses.replace(
            self, se_log_psi=se, ci_low=ci_low, ci_high=ci_high, diagnostics=diag
        )

    def as_dict(self) -> dict:
        return {
            "method": self.method.value,
            "psi": self.psi,
            "log_psi": self.log_psi,
            "se_log_psi": self.se_log_psi,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "bias": self.bias.as_dict(),
            "diagnostics": dict(self.diagnostics),
        }


def load_csv(path, schema: dict) -> CaseControlData:
    """Load a case-control dataset from a comma-delimited, UTF-8 CSV file.

    Parameters
    ----------
    path : file path with a header row.
    schema : mapping with keys ``outcome``, ``exposure``, ``covariates``
        (list of column names, may be empty) and optionally ``stratum``.

    All values must parse as numbers; outcome and exposure must be 0/1.
    Categorical covariates must be numerically pre-encoded by the caller.
    Row numbers in error messages are 1-based data rows (header excluded).
    """
    outcome_col = schema["outcome"]
    exposure_col = schema["exposure"]
    covariate_cols = list(schema.get("covariates", ()))
    stratum_col = schema.get("stratum")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}
        for name in [outcome_col, exposure_col, *covariate_cols] + (
            [stratum_col] if stratum_col else []
        ):
            if name not in col_index:
                raise MissingColumn(name)

        ys, ts, xs, sids = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise RaggedRow(row_no, len(header), len(row))

            def parse(col: str):
                raw = row[col_index[col]].strip()
                try:
                    return float(raw)
                except ValueError:
                    raise ValidationError(
                        f"column {col!r}, data row {row_no}: {raw!r} is not numeric"
                    ) from None

            yv = parse(outcome_col)
            if yv not in (0.0, 1.0):
                raise NonBinaryOutcome(row_no, row[col_index[outcome_col]])
            tv = parse(exposure_col)
            if tv not in (0.0, 1.0):
                raise NonBinaryExposure(row_no, row[col_index[exposure_col]])
            ys.append(int(yv))
            ts.append(int(tv))
            xs.append([parse(c) for c in covariate_cols])
            if stratum_col:
                sv = parse(stratum_col)
                if sv != int(sv):
                    raise ValidationError(
                        f"column {stratum_col!r}, data row {row_no}: "
                        f"stratum label must be an integer"
                    )
                sids.append(int(sv))

    if not ys:
        raise ValidationError(f"{path}: no data rows")
    x = np.array(xs, dtype=np.float64).reshape(len(ys), len(covariate_cols))
    return CaseControlData(
        np.array(ys), np.array(ts), x, np.array(sids) if stratum_col else None
    )


def write_csv(data: CaseControlData, path, schema: dict) -> None:
    """Serialize a dataset back to CSV with the given column names."""
    covariate_cols = list(schema.get("covariates", ()))
    if len(covariate_cols) != data.p:
        raise ValidationError(
            f"schema names {len(covariate_cols)} covariates, data has {data.p}"
        )
    stratum_col = schema.get("stratum")
    if stratum_col and data.stratum_id is None:
        raise ValidationError("schema names a stratum column but data has no labels")
    header = [schema["outcome"], schema["exposure"], *covariate_cols]
    if stratum_col:
        header.append(stratum_col)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [int(data.y[i]), int(data.t_star[i]), *(repr(float(v)) for v in data.x[i])]
            if stratum_col:
                row.append(int(data.stratum_id[i]))
            writer.writerow(row)


def _stratum_counts(data: CaseControlData) -> list[tuple[int, float, float, float, float]]:
    """Observed (label, exposed-case, exposed-control, unexposed-case,
    unexposed-control) counts per stratum."""
    labels = data.strata_labels()
    out = []
    for k in np.unique(labels):
        m = labels == k
        y, t = data.y[m], data.t_star[m]
        a = float(np.sum((y == 1) & (t == 1)))
        b = float(np.sum((y == 0) & (t == 1)))
        c = float(np.sum((y == 1) & (t == 0)))
        d = float(np.sum((y == 0) & (t == 0)))
        out.append((int(k), a, b, c, d))
    return out


def validate_bias_feasibility(data: CaseControlData, bias: RecallBias) -> list[str]:
    """Report, per stratum, whether bias-corrected cell counts would go negative.

    Over-reporting at rate r among cases is feasible in a stratum only when
    r <= a*/(a*+c*) (share of cases reporting exposure); the control-side and
    under-reporting bounds are the mirror images.  Returns a list of warning
    strings; an empty list means the correction is feasible everywhere.
    This is a pure diagnostic -- correction operations enforce feasibility
    themselves.
    """
    if bias.is_none:
        return []
    warnings = []
    for k, a, b, c, d in _stratum_counts(data):
        if bias.direction == BiasDirection.OVER_REPORTING:
            case_bound = a / (a + c) if a + c > 0 else 1.0
            control_bound = b / (b + d) if b + d > 0 else 1.0
        else:
            case_bound = c / (a + c) if a + c > 0 else 1.0
            control_bound = d / (b + d) if b + d > 0 else 1.0
        if bias.theta_case > case_bound:
            warnings.append(
                f"stratum {k}: case rate {bias.theta_case:g} exceeds the "
                f"feasibility bound {case_bound:.6g} (case column would go negative)"
            )
        if bias.theta_control > control_bound:
            warnings.append(
                f"stratum {k}: control rate {bias.theta_control:g} exceeds the "
                f"feasibility bound {control_bound:.6g} (control column would go negative)"
            )
    return warnings
