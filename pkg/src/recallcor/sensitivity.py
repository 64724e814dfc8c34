"""Bootstrap inference, sensitivity grids, R-factor search, ordering checks.

All resampling is deterministic: per-replicate generators are derived from
the master seed, the bias parameter values and the replicate index, so any
grid cell can be reproduced exactly by a direct :func:`bootstrap_ci` call
with the same master seed, and results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np
from scipy.stats import norm

from .data_model import (
    BiasDirection,
    CaseControlData,
    EstimateResult,
    EstimationError,
    Method,
    RecallBias,
)
from .ml_estimator import ml_marginal_cor
from .stratification import (
    DEFAULT_N_STRATA,
    InfeasibleBias,
    ScoreType,
    build_strata,
    crude_cor,
    mantel_haenszel_cor,
    stratified_marginal_cor,
)

EstimatorFn = Callable[[CaseControlData, RecallBias], EstimateResult]


class TooManyFailedResamples(EstimationError):
    """More than the tolerated share of bootstrap resamples failed."""


class Ordering(str, Enum):
    """Verdicts comparing the true estimand with its naive counterpart."""

    PSI_LE_PSI_STAR = "psi_le_psi_star"
    PSI_GE_PSI_STAR = "psi_ge_psi_star"
    INDETERMINATE_AT_EQUALITY = "indeterminate_at_equality"
    UNKNOWN = "unknown"


def make_estimator(
    method: Method | str,
    n_strata: int = DEFAULT_N_STRATA,
    score: ScoreType | None = None,
    prognostic_fit: str = "auto",
    separate_outcomes: bool = False,
    zero_cell_correction: bool = False,
) -> EstimatorFn:
    """Build a ``(data, bias) -> EstimateResult`` callable for a method name.

    The returned callable re-runs the full pipeline on every invocation
    (score fitting, stratum construction, estimation), which is what
    bootstrap resampling and sensitivity grids require.
    """
    method = Method(method)
    if method == Method.CRUDE:

        def estimate(data, bias):
            result = crude_cor(data, level=None)
            # the crude estimator ignores the assumed bias by construction
            diag = dict(result.diagnostics, bias_ignored=1.0)
            return EstimateResult(result.log_psi, Method.CRUDE, bias, diagnostics=diag)

        return estimate

    if method == Method.ML:

        def estimate(data, bias):
            return ml_marginal_cor(data, bias, separate_outcomes=separate_outcomes)

        return estimate

    if method in (Method.STRAT_PROPENSITY, Method.STRAT_PROGNOSTIC, Method.STRAT_USER):
        score_type = score or {
            Method.STRAT_PROPENSITY: ScoreType.PROPENSITY,
            Method.STRAT_PROGNOSTIC: ScoreType.PROGNOSTIC,
            Method.STRAT_USER: ScoreType.USER,
        }[method]

        def estimate(data, bias):
            labels = build_strata(
                data, score_type, n_strata=n_strata, bias=bias,
                prognostic_fit=prognostic_fit,
            )
            return stratified_marginal_cor(
                data, labels, bias, zero_cell_correction, method=method
            )

        return estimate

    if method == Method.MANTEL_HAENSZEL:
        score_type = score or ScoreType.USER

        def estimate(data, bias):
            labels = build_strata(
                data, score_type, n_strata=n_strata, bias=bias,
                prognostic_fit=prognostic_fit,
            )
            return mantel_haenszel_cor(data, labels, bias, zero_cell_correction)

        return estimate

    raise ValueError(f"unknown method {method!r}")


def _float_bits(value: float) -> int:
    return int(np.float64(value).view(np.uint64))


def _bias_plan_key(bias: RecallBias) -> tuple[int, ...]:
    return (
        len(bias.direction.value),
        _float_bits(bias.theta_control),
        _float_bits(bias.theta_case),
    )


def _replicate_rng(seed: int, plan_key: tuple, replicate: int) -> np.random.Generator:
    # entropy mixes the master seed, the plan key and the replicate index:
    # reproducible, and independent of evaluation order
    return np.random.default_rng([int(seed), *plan_key, int(replicate)])


def bootstrap_ci(
    data: CaseControlData,
    estimator: EstimatorFn,
    bias: RecallBias,
    n_boot: int = 500,
    level: float = 0.95,
    seed: int | None = None,
    ci_method: str = "normal",
    max_failure_share: float = 0.05,
) -> EstimateResult:
    """Nonparametric bootstrap confidence interval for an estimator.

    Records are resampled i.i.d. with replacement and the full pipeline is
    re-run per resample.  ``se_log_psi`` is the standard deviation of the
    bootstrap log odds ratios; the default interval is normal on the log
    scale around the point estimate, ``ci_method="percentile"`` uses the
    bootstrap quantiles instead.  Resamples where estimation fails are
    dropped and counted; more than ``max_failure_share`` failures is an
    error.  The resampling plan is redrawn per bias point (deterministically
    from the master seed), so a grid cell and a direct call at the same bias
    and seed agree exactly.
    """
    return _bootstrap_ci(
        data, estimator, bias, n_boot, level, seed, ci_method,
        max_failure_share, _bias_plan_key(bias),
    )


def _bootstrap_ci(
    data, estimator, bias, n_boot, level, seed, ci_method, max_failure_share, plan_key
) -> EstimateResult:
    if seed is None:
        raise ValueError("bootstrap requires an explicit seed")
    if n_boot < 2:
        raise ValueError("n_boot must be at least 2")
    if not (0.0 < level < 1.0):
        raise ValueError("level must be in (0, 1)")

    point = estimator(data, bias)
    n = data.n
    values = []
    failed = 0
    for r in range(n_boot):
        idx = _replicate_rng(seed, plan_key, r).integers(0, n, n)
        try:
            values.append(estimator(data.subset(idx), bias).log_psi)
        except EstimationError:
            failed += 1
    if failed > max_failure_share * n_boot:
        raise TooManyFailedResamples(
            f"{failed} of {n_boot} resamples failed (tolerance "
            f"{max_failure_share:.0%})"
        )
    values = np.asarray(values)
    if values.size > 1 and values.max() > values.min():
        se = float(np.std(values, ddof=1))
    else:
        se = 0.0  # degenerate resampling distribution: the interval is a point
    if ci_method == "normal":
        z = float(norm.ppf(0.5 + level / 2.0))
        lo = math.exp(point.log_psi - z * se)
        hi = math.exp(point.log_psi + z * se)
    elif ci_method == "percentile":
        qlo, qhi = np.quantile(values, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
        lo, hi = math.exp(float(qlo)), math.exp(float(qhi))
    else:
        raise ValueError(f"unknown ci_method {ci_method!r}")
    return point.with_inference(
        se, lo, hi,
        {"n_boot": float(n_boot), "n_boot_used": float(values.size),
         "n_boot_failed": float(failed), "level": level},
    )


def _bias_at(direction: BiasDirection, theta_control: float, theta_case: float) -> RecallBias:
    if direction == BiasDirection.OVER_REPORTING:
        return RecallBias.over_reporting(theta_control, theta_case)
    if direction == BiasDirection.UNDER_REPORTING:
        return RecallBias.under_reporting(theta_control, theta_case)
    if theta_control != 0.0 or theta_case != 0.0:
        raise ValueError("nonzero rates need an over/under direction")
    return RecallBias.none()


@dataclass(frozen=True)
class GridCell:
    theta_control: float
    theta_case: float
    result: EstimateResult | None
    feasible: bool
    message: str = ""


@dataclass(frozen=True)
class SensitivityGrid:
    """Estimates over a grid of bias parameters.

    ``cells[i][j]`` corresponds to ``(axis0[i], axis1[j])`` where axis0 holds
    control-side rates and axis1 case-side rates; with ``constrained_equal``
    the two rates move together along one axis and ``cells`` is 1 x k.
    """

    axis0: np.ndarray
    axis1: np.ndarray
    cells: tuple
    direction: BiasDirection
    constrained_equal: bool = False

    def iter_cells(self):
        for row in self.cells:
            yield from row


def sensitivity_scan(
    data: CaseControlData,
    estimator: EstimatorFn,
    direction: BiasDirection,
    grid,
    n_boot: int = 500,
    level: float = 0.95,
    seed: int | None = None,
    constrained_equal: bool = False,
    ci_method: str = "normal",
) -> SensitivityGrid:
    """Evaluate an estimator over a grid of misreporting rates.

    ``grid`` is either a single value vector (``constrained_equal=True``,
    both rates equal) or a pair ``(control_values, case_values)``.
    Cells where the correction is infeasible or estimation fails are marked,
    not raised.  With ``n_boot=0`` only point estimates are computed.
    """
    if constrained_equal:
        values = np.asarray(grid, dtype=float)
        pairs = [[(float(v), float(v)) for v in values]]
        axis0 = axis1 = values
    else:
        axis0 = np.asarray(grid[0], dtype=float)
        axis1 = np.asarray(grid[1], dtype=float)
        pairs = [[(float(v0), float(v1)) for v1 in axis1] for v0 in axis0]

    rows = []
    for row in pairs:
        cells = []
        for theta_control, theta_case in row:
            bias = _bias_at(direction, theta_control, theta_case)
            try:
                if n_boot > 0:
                    res = bootstrap_ci(
                        data, estimator, bias, n_boot=n_boot, level=level,
                        seed=seed, ci_method=ci_method,
                    )
                else:
                    res = estimator(data, bias)
                cells.append(GridCell(theta_control, theta_case, res, True))
            except InfeasibleBias as exc:
                cells.append(GridCell(theta_control, theta_case, None, False, str(exc)))
            except EstimationError as exc:
                cells.append(
                    GridCell(theta_control, theta_case, None, False,
                             f"estimation failed: {exc}")
                )
        rows.append(tuple(cells))
    return SensitivityGrid(axis0, axis1, tuple(rows), direction, constrained_equal)


def write_grid_csv(grid: SensitivityGrid, path) -> None:
    """Long-format CSV (axis0, axis1, log_psi, ci_low, ci_high, feasible)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis0", "axis1", "log_psi", "ci_low", "ci_high", "feasible"])
        for cell in grid.iter_cells():
            if cell.result is None:
                writer.writerow([repr(cell.theta_control), repr(cell.theta_case),
                                 "", "", "", "false"])
            else:
                r = cell.result
                writer.writerow([
                    repr(cell.theta_control), repr(cell.theta_case), repr(r.log_psi),
                    "" if r.ci_low is None else repr(r.ci_low),
                    "" if r.ci_high is None else repr(r.ci_high),
                    "true",
                ])


@dataclass(frozen=True)
class RFactorResult:
    """Smallest misreporting rate that flips statistical significance.

    ``value`` is the midpoint of the final bisection bracket (width at most
    0.002) or None when no flip occurs inside the feasible range.
    """

    value: float | None
    varied: str  # "case-bias" or "control-bias"
    fixed_other: float
    alpha: float
    initial_significant: bool
    n_evaluations: int = 0
    message: str = ""

    @property
    def found(self) -> bool:
        return self.value is not None

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "status": "found" if self.found else "not-found",
            "varied": self.varied,
            "fixed_other": self.fixed_other,
            "alpha": self.alpha,
            "initial_significant": self.initial_significant,
            "n_evaluations": self.n_evaluations,
            "message": self.message,
        }


def r_factor(
    data: CaseControlData,
    estimator: EstimatorFn,
    direction: BiasDirection,
    varied: str = "case-bias",
    fixed_other: float = 0.0,
    alpha: float = 0.05,
    n_boot: int = 500,
    seed: int | None = None,
    scan_step: float = 0.005,
    max_value: float = 0.999,
    bracket_width: float = 0.002,
) -> RFactorResult:
    """Scan one misreporting rate upward until significance flips.

    Significance means the (1-alpha) bootstrap interval excludes an odds
    ratio of 1.  The varied rate starts at zero (the other held at
    ``fixed_other``); the scan advances in ``scan_step`` increments and the
    first flip is refined by bisection to a bracket of width at most
    ``bracket_width``.  Scanning rather than pure bisection guards against
    non-monotone interval endpoints; point-estimate monotonicity holds for
    the stratification estimator but is not assumed for the interval.
    One resampling plan (derived from the seed) is held fixed across all
    evaluations, so the significance boundary is a well-defined function of
    the scanned rate.  Reaching the feasibility boundary (or ``max_value``)
    without a flip is reported as a not-found result, not an error.
    """
    if varied not in ("case-bias", "control-bias"):
        raise ValueError("varied must be 'case-bias' or 'control-bias'")
    if direction == BiasDirection.NONE:
        raise ValueError("r_factor needs an over/under-reporting direction")

    evaluations = 0

    def significant(value: float) -> bool:
        nonlocal evaluations
        evaluations += 1
        if varied == "case-bias":
            bias = _bias_at(direction, fixed_other, value)
        else:
            bias = _bias_at(direction, value, fixed_other)
        res = _bootstrap_ci(data, estimator, bias, n_boot, 1.0 - alpha, seed,
                            "normal", 0.05, plan_key=(1,))
        return res.ci_low > 1.0 or res.ci_high < 1.0

    initial = significant(0.0)
    low, value = 0.0, 0.0
    flip = None
    while value < max_value:
        value = min(value + scan_step, max_value)
        try:
            if significant(value) != initial:
                flip = value
                break
        except EstimationError as exc:
            return RFactorResult(
                None, varied, fixed_other, alpha, initial, evaluations,
                f"no flip before the feasible range ended at {value:g}: {exc}",
            )
        low = value
    if flip is None:
        return RFactorResult(
            None, varied, fixed_other, alpha, initial, evaluations,
            f"no flip up to {max_value:g}",
        )

    high = flip
    while high - low > bracket_width:
        mid = 0.5 * (low + high)
        if significant(mid) == initial:
            low = mid
        else:
            high = mid
    return RFactorResult(
        0.5 * (low + high), varied, fixed_other, alpha, initial, evaluations
    )


def check_ordering_conditional(
    q1_star: float, q0_star: float, bias: RecallBias
) -> Ordering:
    """Compare the covariate-conditional odds ratio with its naive analogue.

    ``q1_star``/``q0_star`` are P(reported exposure = 1 | case/control) at a
    fixed covariate value.  Under over-reporting the true conditional odds
    ratio is below the naive one exactly when q1*·rate_control is at most
    q0*·rate_case; under-reporting mirrors the inequality on the complement
    probabilities.  Exact equality (both weak inequalities) is reported as
    indeterminate.
    """
    for name, q in (("q1_star", q1_star), ("q0_star", q0_star)):
        if not (0.0 <= q <= 1.0):
            raise ValueError(f"{name} must be a probability, got {q}")
    if bias.is_none:
        return Ordering.INDETERMINATE_AT_EQUALITY
    if bias.direction == BiasDirection.OVER_REPORTING:
        lhs = q1_star * bias.theta_control
        rhs = q0_star * bias.theta_case
    else:
        lhs = (1.0 - q0_star) * bias.theta_case
        rhs = (1.0 - q1_star) * bias.theta_control
    # in both branches: lhs < rhs means psi(x) <= psi*(x)
    if lhs == rhs:
        return Ordering.INDETERMINATE_AT_EQUALITY
    return Ordering.PSI_LE_PSI_STAR if lhs < rhs else Ordering.PSI_GE_PSI_STAR


def check_ordering_marginal(
    psi_x_min: float, psi_x_max: float, bias: RecallBias
) -> Ordering:
    """Sufficient-condition check for ordering the *marginal* odds ratios.

    Needs only the range of the conditional odds ratio over covariate
    values.  The conditions are sufficient, not necessary, so UNKNOWN means
    no conclusion, not a refutation.  A zero rate in the relevant
    denominator is treated as an infinite threshold.
    """
    if not (0.0 < psi_x_min <= psi_x_max):
        raise ValueError("need 0 < psi_x_min <= psi_x_max")
    if bias.is_none:
        return Ordering.INDETERMINATE_AT_EQUALITY

    if bias.direction == BiasDirection.OVER_REPORTING:
        rc, rk = bias.theta_control, bias.theta_case
        ratio = math.inf if rc == 0.0 else rk / rc
        if rc <= rk and psi_x_max <= ratio:
            return Ordering.PSI_LE_PSI_STAR
        if rc >= rk and psi_x_min >= ratio:
            return Ordering.PSI_GE_PSI_STAR
        return Ordering.UNKNOWN

    rc, rk = bias.theta_control, bias.theta_case
    ratio = math.inf if rk == 0.0 else rc / rk
    if rc <= rk and psi_x_min >= ratio:
        return Ordering.PSI_GE_PSI_STAR
    if rc >= rk and psi_x_max <= ratio:
        return Ordering.PSI_LE_PSI_STAR
    return Ordering.UNKNOWN
