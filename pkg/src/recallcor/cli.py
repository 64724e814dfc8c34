"""Command-line interface.

Subcommands: estimate, sensitivity, rfactor, simulate, check-conditions.
Single results are emitted as JSON documents on stdout; grids and study
tables are written as CSV files via --out with a JSON summary on stdout.
Every output embeds the resolved configuration and the tool version, and
all randomness flows from the --seed flag, so identical invocations produce
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__
from .data_model import (
    BiasDirection,
    EstimationError,
    RecallBias,
    ValidationError,
    load_csv,
    validate_bias_feasibility,
)
from .glm import add_intercept, fit_logistic, fitted_probs
from .sensitivity import (
    Ordering,
    bootstrap_ci,
    check_ordering_conditional,
    check_ordering_marginal,
    make_estimator,
    r_factor,
    sensitivity_scan,
)
from .simulation import (
    SCENARIO_INTERACTIONS,
    parse_scenario_file,
    run_study,
    standard_scenarios,
    write_study_csv,
)

_METHOD_CHOICES = ["crude", "ml", "strat-propensity", "strat-prognostic", "strat-user", "mh"]


def _add_data_flags(parser):
    parser.add_argument("--input", required=True, help="CSV file with a header row")
    parser.add_argument("--outcome-col", required=True)
    parser.add_argument("--exposure-col", required=True)
    parser.add_argument("--covariates", default="",
                        help="comma-separated covariate column names (may be empty)")
    parser.add_argument("--stratum-col", default=None)


def _add_bias_flags(parser):
    parser.add_argument("--over-report", default=None, metavar="R0,R1",
                        help="over-reporting rates: control,case")
    parser.add_argument("--under-report", default=None, metavar="R0,R1",
                        help="under-reporting rates: control,case")


def _add_estimator_flags(parser):
    parser.add_argument("--method", choices=_METHOD_CHOICES, default="ml")
    parser.add_argument("--strata", type=int, default=5,
                        help="number of score-based strata")
    parser.add_argument("--prognostic-fit",
                        choices=["auto", "reported-unexposed", "full-data"],
                        default="auto")
    parser.add_argument("--separate-outcomes", action="store_true",
                        help="fit separate outcome models for exposed/unexposed")
    parser.add_argument("--zero-cell-correction", action="store_true",
                        help="add 0.5 to the cells of tables containing a zero")


def _add_inference_flags(parser, default_boot=500):
    parser.add_argument("--boot", type=int, default=default_boot,
                        help="bootstrap resamples (0 disables the interval)")
    parser.add_argument("--level", type=float, default=0.95)
    parser.add_argument("--ci-method", choices=["normal", "percentile"],
                        default="normal")
    parser.add_argument("--seed", type=int, default=None)


def _parse_rates(text: str, flag: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValidationError(f"{flag} expects two comma-separated rates: control,case")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ValidationError(f"{flag}: rates must be numeric") from None


def _bias_from_args(args) -> RecallBias:
    if args.over_report and args.under_report:
        raise ValidationError("give at most one of --over-report / --under-report")
    if args.over_report:
        control, case = _parse_rates(args.over_report, "--over-report")
        return RecallBias.over_reporting(control, case)
    if args.under_report:
        control, case = _parse_rates(args.under_report, "--under-report")
        return RecallBias.under_reporting(control, case)
    return RecallBias.none()


def _load_data(args):
    schema = {
        "outcome": args.outcome_col,
        "exposure": args.exposure_col,
        "covariates": [c for c in args.covariates.split(",") if c.strip()],
    }
    if args.stratum_col:
        schema["stratum"] = args.stratum_col
    return load_csv(args.input, schema)


def _estimator_from_args(args):
    return make_estimator(
        args.method,
        n_strata=args.strata,
        prognostic_fit=args.prognostic_fit,
        separate_outcomes=args.separate_outcomes,
        zero_cell_correction=args.zero_cell_correction,
    )


def _require_seed(args):
    if args.seed is None:
        raise ValidationError("--seed is required whenever resampling is involved")


def _config_echo(args) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    return {k.replace("_", "-"): v for k, v in sorted(config.items())}


def _document(command: str, args, result: dict) -> dict:
    return {
        "tool": "recallcor",
        "version": __version__,
        "command": command,
        "config": _config_echo(args),
        "result": result,
    }


def _emit(doc: dict, out_path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _direction_from_args(args) -> BiasDirection:
    return BiasDirection.OVER_REPORTING if args.direction == "over" else BiasDirection.UNDER_REPORTING


def _parse_grid_axis(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValidationError("grid axis must look like lo:hi:step") from None
    if step <= 0 or hi < lo:
        raise ValidationError("grid axis needs step > 0 and hi >= lo")
    count = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(count), 12)


def cmd_estimate(args) -> int:
    data = _load_data(args)
    bias = _bias_from_args(args)
    estimator = _estimator_from_args(args)
    feasibility = validate_bias_feasibility(data, bias)
    if args.boot > 0:
        _require_seed(args)
        result = bootstrap_ci(data, estimator, bias, n_boot=args.boot,
                              level=args.level, seed=args.seed,
                              ci_method=args.ci_method)
    else:
        result = estimator(data, bias)
    payload = result.as_dict()
    payload["feasibility_warnings"] = feasibility
    payload["n"] = data.n
    payload["p"] = data.p

    if args.format == "csv":
        writer = csv.writer(sys.stdout)
        header = ["method", "psi", "log_psi", "se_log_psi", "ci_low", "ci_high",
                  "direction", "theta_control", "theta_case"]
        writer.writerow(header)
        writer.writerow([
            result.method.value, repr(result.psi), repr(result.log_psi),
            "" if result.se_log_psi is None else repr(result.se_log_psi),
            "" if result.ci_low is None else repr(result.ci_low),
            "" if result.ci_high is None else repr(result.ci_high),
            bias.direction.value, repr(bias.theta_control), repr(bias.theta_case),
        ])
        if args.out:
            doc = _document("estimate", args, payload)
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return 0
    _emit(_document("estimate", args, payload), args.out)
    return 0


def cmd_sensitivity(args) -> int:
    data = _load_data(args)
    estimator = _estimator_from_args(args)
    direction = _direction_from_args(args)
    if args.boot > 0:
        _require_seed(args)

    axes = args.grid.split(",")
    if len(axes) not in (1, 2):
        raise ValidationError("--grid takes one or two lo:hi:step ranges")
    axis0 = _parse_grid_axis(axes[0])
    if args.diagonal:
        if len(axes) != 1:
            raise ValidationError("--diagonal takes a single grid range")
        grid_spec = axis0
    else:
        axis1 = _parse_grid_axis(axes[1]) if len(axes) == 2 else axis0
        grid_spec = (axis0, axis1)

    grid = sensitivity_scan(
        data, estimator, direction, grid_spec, n_boot=args.boot,
        level=args.level, seed=args.seed, constrained_equal=args.diagonal,
        ci_method=args.ci_method,
    )

    prefix = "eta" if direction == BiasDirection.OVER_REPORTING else "zeta"
    cells_out = []
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{prefix}0", f"{prefix}1", "psi", "ci_low", "ci_high", "feasible"])
        for cell in grid.iter_cells():
            if cell.result is None:
                row = [repr(cell.theta_control), repr(cell.theta_case), "", "", "", "false"]
                cells_out.append({
                    "theta_control": cell.theta_control, "theta_case": cell.theta_case,
                    "feasible": False, "message": cell.message,
                })
            else:
                r = cell.result
                row = [
                    repr(cell.theta_control), repr(cell.theta_case), repr(r.psi),
                    "" if r.ci_low is None else repr(r.ci_low),
                    "" if r.ci_high is None else repr(r.ci_high),
                    "true",
                ]
                cells_out.append({
                    "theta_control": cell.theta_control, "theta_case": cell.theta_case,
                    "feasible": True, "psi": r.psi, "ci_low": r.ci_low,
                    "ci_high": r.ci_high,
                })
            writer.writerow(row)

    _emit(_document("sensitivity", args, {
        "csv": args.out,
        "n_cells": len(cells_out),
        "n_infeasible": sum(1 for c in cells_out if not c["feasible"]),
        "cells": cells_out,
    }))
    return 0


def cmd_rfactor(args) -> int:
    data = _load_data(args)
    estimator = _estimator_from_args(args)
    direction = _direction_from_args(args)
    _require_seed(args)
    result = r_factor(
        data, estimator, direction,
        varied=args.vary, fixed_other=args.fixed_other, alpha=args.alpha,
        n_boot=args.boot, seed=args.seed, scan_step=args.scan_step,
    )
    _emit(_document("rfactor", args, result.as_dict()), args.out)
    return 0


def cmd_simulate(args) -> int:
    _require_seed(args)
    scenarios = []
    for preset in args.preset or []:
        scenarios.extend(
            standard_scenarios([preset], n=args.n, n_reps=args.reps, seed=args.seed)
        )
    for path in args.scenario or []:
        scenarios.append(parse_scenario_file(path))
    if not scenarios:
        raise ValidationError("simulate needs at least one --preset or --scenario")

    estimators = [e for e in args.estimators.split(",") if e.strip()]
    report = run_study(scenarios, estimators, n_reps=args.reps)
    write_study_csv(report, args.out)

    _emit(_document("simulate", args, {
        "csv": args.out,
        "rows": [
            {
                "scenario": row.label,
                "n": row.n,
                "n_reps": row.n_reps,
                "true": row.true_log_cor,
                "mean_log_psi": row.mean_log_psi,
                "failures": row.failures,
            }
            for row in report.rows
        ],
    }))
    return 0


def cmd_check_conditions(args) -> int:
    data = _load_data(args)
    bias = _bias_from_args(args)
    if bias.is_none:
        raise ValidationError("check-conditions needs --over-report or --under-report")

    # model for P(reported exposure = 1 | outcome, covariates): the outcome
    # coefficient's sign already decides the equal-rates ordering
    design = np.hstack([add_intercept(data.x), data.y[:, None].astype(float)])
    fit = fit_logistic(design, data.t_star)
    q_if_case = fitted_probs(fit, np.hstack([add_intercept(data.x),
                                             np.ones((data.n, 1))]))
    q_if_control = fitted_probs(fit, np.hstack([add_intercept(data.x),
                                                np.zeros((data.n, 1))]))
    tally = {o: 0 for o in Ordering}
    for q1, q0 in zip(q_if_case, q_if_control):
        tally[check_ordering_conditional(float(q1), float(q0), bias)] += 1

    result = {
        "conditional": {
            "n_records": data.n,
            "n_psi_le_psi_star": tally[Ordering.PSI_LE_PSI_STAR],
            "n_psi_ge_psi_star": tally[Ordering.PSI_GE_PSI_STAR],
            "n_indeterminate": tally[Ordering.INDETERMINATE_AT_EQUALITY],
            "unanimous": (
                Ordering.PSI_LE_PSI_STAR.value
                if tally[Ordering.PSI_LE_PSI_STAR] == data.n
                else Ordering.PSI_GE_PSI_STAR.value
                if tally[Ordering.PSI_GE_PSI_STAR] == data.n
                else "mixed"
            ),
        },
        "reporting_model": {
            "outcome_coefficient": float(fit.coefficients[-1]),
            "converged": fit.converged,
        },
    }
    if args.psi_min is not None or args.psi_max is not None:
        if args.psi_min is None or args.psi_max is None:
            raise ValidationError("--psi-min and --psi-max must be given together")
        result["marginal"] = check_ordering_marginal(args.psi_min, args.psi_max, bias).value
    _emit(_document("check-conditions", args, result), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recallcor",
        description="Causal odds ratios for case-control data under recall bias",
    )
    parser.add_argument("--version", action="version", version=f"recallcor {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="one estimate with a bootstrap interval")
    _add_data_flags(p)
    _add_bias_flags(p)
    _add_estimator_flags(p)
    _add_inference_flags(p)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="scan a grid of misreporting rates")
    _add_data_flags(p)
    _add_estimator_flags(p)
    _add_inference_flags(p)
    p.add_argument("--direction", choices=["over", "under"], required=True)
    p.add_argument("--grid", required=True, metavar="LO:HI:STEP[,LO:HI:STEP]")
    p.add_argument("--diagonal", action="store_true",
                   help="constrain both rates to move together")
    p.add_argument("--out", required=True, help="grid CSV output path")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("rfactor", help="smallest bias that flips significance")
    _add_data_flags(p)
    _add_estimator_flags(p)
    _add_inference_flags(p)
    p.add_argument("--direction", choices=["over", "under"], required=True)
    p.add_argument("--vary", choices=["case-bias", "control-bias"], default="case-bias")
    p.add_argument("--fixed-other", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--scan-step", type=float, default=0.005)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_rfactor)

    p = sub.add_parser("simulate", help="replicate reference or custom scenarios")
    p.add_argument("--preset", action="append",
                   choices=sorted(SCENARIO_INTERACTIONS), default=None)
    p.add_argument("--scenario", action="append", default=None,
                   help="key=value scenario file (repeatable)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--estimators",
                   default="crude,ml,strat-propensity,strat-prognostic")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="study CSV output path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check-conditions",
                       help="ordering checks for the assumed bias")
    _add_data_flags(p)
    _add_bias_flags(p)
    p.add_argument("--psi-min", type=float, default=None,
                   help="lower bound of the conditional odds ratio over x")
    p.add_argument("--psi-max", type=float, default=None,
                   help="upper bound of the conditional odds ratio over x")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_check_conditions)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
