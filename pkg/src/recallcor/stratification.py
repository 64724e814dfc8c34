"""Bias-corrected 2x2 tables, score-based strata, and stratified estimators.

Each stratum contributes an observed 2x2 table of (reported exposure x
case/control) counts.  Misreporting moves probability mass between the
exposed and unexposed rows within each outcome column, so for known rates
the true-exposure table can be recovered by rescaling:

  over-reporting   a = (a* - r1*(a*+c*)) / (1-r1)    c = c* / (1-r1)
                   b = (b* - r0*(b*+d*)) / (1-r0)    d = d* / (1-r0)

  under-reporting  a = a* / (1-r1)    c = (c* - r1*(a*+c*)) / (1-r1)
                   b = b* / (1-r0)    d = (d* - r0*(b*+d*)) / (1-r0)

where r1/r0 are the case/control misreporting rates.  Both corrections
preserve the case margin a+c = a*+c* and the control margin b+d = b*+d*.
Corrected counts are kept as reals; rounding would break the monotonicity
of the stratified estimator in the bias parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data_model import (
    BiasDirection,
    CaseControlData,
    EstimateResult,
    EstimationError,
    Method,
    RecallBias,
)
from .glm import add_intercept, fit_logistic

DEFAULT_N_STRATA = 5


class EmptyStratum(EstimationError):
    """A constructed stratum has no cases or no controls."""


class ScoreFitFailure(EstimationError):
    """The score model did not converge or could not be fit."""


class InfeasibleBias(EstimationError):
    """Bias correction drives one or more cell counts negative."""


class EmptyStratumCell(EstimationError):
    """A corrected stratum margin is zero; stratum probabilities undefined."""


class ZeroDenominator(EstimationError):
    """A pooled numerator or denominator vanished; the odds ratio is undefined."""


class ScoreType(str, Enum):
    PROPENSITY = "propensity"
    PROGNOSTIC = "prognostic"
    USER = "user"


@dataclass(frozen=True)
class StratumTable:
    """Observed 2x2 counts under reported exposure for one stratum.

    a*: exposed cases, b*: exposed controls, c*: unexposed cases,
    d*: unexposed controls.
    """

    a_star: float
    b_star: float
    c_star: float
    d_star: float

    def __post_init__(self):
        for v in (self.a_star, self.b_star, self.c_star, self.d_star):
            if v < 0:
                raise ValueError("counts must be nonnegative")

    @property
    def n_star(self) -> float:
        return self.a_star + self.b_star + self.c_star + self.d_star

    def shifted(self, amount: float) -> "StratumTable":
        return StratumTable(
            self.a_star + amount,
            self.b_star + amount,
            self.c_star + amount,
            self.d_star + amount,
        )


@dataclass(frozen=True)
class CorrectedTable:
    """Bias-corrected real-valued counts; ``feasible`` iff all nonnegative."""

    a: float
    b: float
    c: float
    d: float
    feasible: bool

    @property
    def n(self) -> float:
        return self.a + self.b + self.c + self.d


def correct_table(table: StratumTable, bias: RecallBias) -> CorrectedTable:
    """Recover the true-exposure 2x2 table for the given misreporting rates.

    Never truncates: negative corrected counts are returned as-is with
    ``feasible=False`` so callers can decide whether to error or to mark the
    cell infeasible (sensitivity grids do the latter).
    """
    a, b, c, d = table.a_star, table.b_star, table.c_star, table.d_star
    r1, r0 = bias.theta_case, bias.theta_control
    if bias.direction == BiasDirection.OVER_REPORTING:
        a, c = (a - r1 * (a + c)) / (1.0 - r1), c / (1.0 - r1)
        b, d = (b - r0 * (b + d)) / (1.0 - r0), d / (1.0 - r0)
    elif bias.direction == BiasDirection.UNDER_REPORTING:
        a, c = a / (1.0 - r1), (c - r1 * (a + c)) / (1.0 - r1)
        b, d = b / (1.0 - r0), (d - r0 * (b + d)) / (1.0 - r0)
    feasible = a >= 0.0 and b >= 0.0 and c >= 0.0 and d >= 0.0
    return CorrectedTable(a, b, c, d, feasible)


def tables_from_data(data: CaseControlData, labels: np.ndarray) -> list[StratumTable]:
    """Observed per-stratum tables, in increasing label order."""
    labels = np.asarray(labels)
    out = []
    for k in np.unique(labels):
        m = labels == k
        y, t = data.y[m], data.t_star[m]
        out.append(
            StratumTable(
                float(np.sum((y == 1) & (t == 1))),
                float(np.sum((y == 0) & (t == 1))),
                float(np.sum((y == 1) & (t == 0))),
                float(np.sum((y == 0) & (t == 0))),
            )
        )
    return out


def _quantile_labels(score: np.ndarray, n_strata: int) -> np.ndarray:
    # boundary-valued scores go to the lower stratum
    cuts = np.quantile(score, np.arange(1, n_strata) / n_strata)
    return np.searchsorted(cuts, score, side="left")


def build_strata(
    data: CaseControlData,
    score: ScoreType,
    n_strata: int = DEFAULT_N_STRATA,
    bias: RecallBias | None = None,
    prognostic_fit: str = "auto",
) -> np.ndarray:
    """Assign each record to a stratum; returns integer labels 0..K-1.

    Parameters
    ----------
    score : PROPENSITY cuts the fitted reported-exposure score at empirical
        quantiles; PROGNOSTIC cuts the fitted baseline-outcome score; USER
        passes through ``stratum_id`` (labels are trusted as given).
    n_strata : number of quantile strata (ignored for USER).
    bias : determines which records identify the prognostic score.  Under
        over-reporting a reported-unexposed subject is known to be truly
        unexposed, so the outcome model is fit on the T*=0 subset; otherwise
        the outcome model is fit on all records with the reported exposure
        as a regressor.
    prognostic_fit : "auto" (choose by bias direction as above),
        "reported-unexposed", or "full-data".

    Raises EmptyStratum when a quantile stratum ends up without cases or
    without controls, and ScoreFitFailure when the score model is unusable.
    """
    bias = RecallBias.none() if bias is None else bias
    if score == ScoreType.USER:
        return data.strata_labels()
    if n_strata < 2:
        raise ValueError("n_strata must be at least 2 for score-based strata")
    if data.p == 0:
        raise ScoreFitFailure("score-based strata require at least one covariate")

    X = add_intercept(data.x)
    if score == ScoreType.PROPENSITY:
        fit = _checked_fit(X, data.t_star, "propensity model")
        values = X @ fit.coefficients
    elif score == ScoreType.PROGNOSTIC:
        mode = prognostic_fit
        if mode == "auto":
            mode = (
                "reported-unexposed"
                if bias.direction == BiasDirection.OVER_REPORTING
                else "full-data"
            )
        if mode == "reported-unexposed":
            subset = data.t_star == 0
            if not subset.any():
                raise ScoreFitFailure(
                    "no reported-unexposed records to identify the prognostic score"
                )
            fit = _checked_fit(X[subset], data.y[subset], "prognostic model")
            values = data.x @ fit.coefficients[1:]
        elif mode == "full-data":
            design = np.hstack([X, data.t_star[:, None].astype(float)])
            fit = _checked_fit(design, data.y, "prognostic model")
            values = data.x @ fit.coefficients[1 : 1 + data.p]
        else:
            raise ValueError(f"unknown prognostic_fit mode {prognostic_fit!r}")
    else:
        raise ValueError(f"unknown score type {score!r}")

    labels = _quantile_labels(values, n_strata)
    for k in range(n_strata):
        m = labels == k
        if not m.any() or data.y[m].min() == data.y[m].max():
            raise EmptyStratum(f"stratum {k} has no cases or no controls")
    return labels


def _checked_fit(X, y, what: str):
    try:
        fit = fit_logistic(X, y)
    except EstimationError as exc:
        raise ScoreFitFailure(f"{what}: {exc}") from exc
    if not fit.converged:
        raise ScoreFitFailure(f"{what} did not converge")
    return fit


def _corrected_tables(tables, bias, zero_cell_correction):
    """Corrected tables plus the (possibly shifted) observed tables used."""
    if zero_cell_correction:
        tables = [
            t.shifted(0.5) if min(t.a_star, t.b_star, t.c_star, t.d_star) == 0 else t
            for t in tables
        ]
    corrected = [correct_table(t, bias) for t in tables]
    bad = [i for i, c in enumerate(corrected) if not c.feasible]
    if bad:
        raise InfeasibleBias(
            f"bias correction produces negative counts in strata {bad}"
        )
    return tables, corrected


def stratified_marginal_cor_from_tables(
    tables: list[StratumTable],
    bias: RecallBias,
    zero_cell_correction: bool = False,
    method: Method = Method.STRAT_USER,
) -> EstimateResult:
    """Stratified marginal odds-ratio estimate from per-stratum tables.

    Stratum-specific outcome probabilities are computed on the corrected
    counts (cases among exposed, cases among unexposed) and combined with
    weights proportional to stratum size.
    """
    tables, corrected = _corrected_tables(tables, bias, zero_cell_correction)
    total = sum(t.n_star for t in tables)
    p1 = p0 = 0.0
    for i, (t, c) in enumerate(zip(tables, corrected)):
        if c.a + c.b <= 0 or c.c + c.d <= 0:
            raise EmptyStratumCell(f"stratum {i}: a corrected exposure margin is zero")
        s = t.n_star / total
        p1 += s * c.a / (c.a + c.b)
        p0 += s * c.c / (c.c + c.d)
    if not (0.0 < p0 < 1.0 and 0.0 < p1 < 1.0):
        raise EmptyStratumCell(
            f"weighted outcome probabilities ({p0:.3g}, {p1:.3g}) must lie in (0, 1)"
        )
    log_psi = math.log(p1) + math.log1p(-p0) - math.log(p0) - math.log1p(-p1)
    return EstimateResult(
        log_psi=log_psi,
        method=method,
        bias=bias,
        diagnostics={
            "n_strata": float(len(tables)),
            "p1_hat": p1,
            "p0_hat": p0,
            "min_corrected_cell": min(min(c.a, c.b, c.c, c.d) for c in corrected),
        },
    )


def stratified_marginal_cor(
    data: CaseControlData,
    strata: np.ndarray,
    bias: RecallBias,
    zero_cell_correction: bool = False,
    method: Method = Method.STRAT_USER,
) -> EstimateResult:
    """Stratified marginal odds ratio for a dataset plus stratum labels."""
    return stratified_marginal_cor_from_tables(
        tables_from_data(data, strata), bias, zero_cell_correction, method
    )


def mantel_haenszel_from_tables(
    tables: list[StratumTable],
    bias: RecallBias,
    zero_cell_correction: bool = False,
) -> EstimateResult:
    """Common odds ratio across corrected strata (Mantel-Haenszel pooling).

    Note this targets the *common* odds ratio, which generally differs from
    the marginal one; the diagnostics carry a flag saying so.
    """
    _, corrected = _corrected_tables(tables, bias, zero_cell_correction)
    num = sum(c.a * c.d / c.n for c in corrected if c.n > 0)
    den = sum(c.b * c.c / c.n for c in corrected if c.n > 0)
    if den <= 0.0:
        raise ZeroDenominator("Mantel-Haenszel denominator sum is zero")
    if num <= 0.0:
        raise ZeroDenominator("Mantel-Haenszel numerator sum is zero")
    return EstimateResult(
        log_psi=math.log(num / den),
        method=Method.MANTEL_HAENSZEL,
        bias=bias,
        diagnostics={"n_strata": float(len(tables)), "targets_common_cor": 1.0},
    )


def mantel_haenszel_cor(
    data: CaseControlData,
    strata: np.ndarray,
    bias: RecallBias,
    zero_cell_correction: bool = False,
) -> EstimateResult:
    return mantel_haenszel_from_tables(
        tables_from_data(data, strata), bias, zero_cell_correction
    )


def crude_cor(data: CaseControlData, level: float | None = 0.95) -> EstimateResult:
    """Sample odds ratio of the pooled reported-exposure table, no adjustment.

    When ``level`` is given, the classical large-sample (Woolf) interval on
    the log odds ratio is attached.
    """
    pooled = tables_from_data(data, np.zeros(data.n, dtype=int))[0]
    a, b, c, d = pooled.a_star, pooled.b_star, pooled.c_star, pooled.d_star
    if min(a, b, c, d) <= 0:
        raise ZeroDenominator("crude odds ratio undefined: a pooled cell is zero")
    log_psi = math.log(a) + math.log(d) - math.log(b) - math.log(c)
    result = EstimateResult(
        log_psi=log_psi,
        method=Method.CRUDE,
        bias=RecallBias.none(),
        diagnostics={"a": a, "b": b, "c": c, "d": d},
    )
    if level is not None:
        from scipy.stats import norm

        se = math.sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
        z = norm.ppf(0.5 + level / 2.0)
        result = result.with_inference(
            se, math.exp(log_psi - z * se), math.exp(log_psi + z * se)
        )
    return result
