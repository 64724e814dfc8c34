"""Maximum-likelihood recovery of the marginal causal odds ratio.

The observed data are (Y, T*, X) where T* is the misreported exposure.  For
fixed misreporting rates the joint probability P(Y, T* | X) is a mixture of
an outcome model m_t(x) = P(Y=1 | T=t, x) and an exposure model
e(x) = P(T=1 | x), both Bernoulli-logit.  Maximizing the resulting
log-likelihood recovers the model parameters; averaging the fitted m_t over
the empirical covariate distribution then gives the marginal causal odds
ratio.

Over-reporting (truly unexposed subjects report exposure at rate r1 for
cases, r0 for controls; truly exposed always report exposure):

    P(Y=1, T*=1 | x) = m1*e + r1*m0*(1-e)
    P(Y=0, T*=1 | x) = (1-m1)*e + r0*(1-m0)*(1-e)
    P(Y=1, T*=0 | x) = (1-r1)*m0*(1-e)
    P(Y=0, T*=0 | x) = (1-r0)*(1-m0)*(1-e)

Under-reporting (truly exposed subjects deny exposure at rate r1/r0; truly
unexposed always report no exposure) mirrors the above by flipping the roles
of the exposed and unexposed contributions:

    P(Y=1, T*=1 | x) = (1-r1)*m1*e
    P(Y=0, T*=1 | x) = (1-r0)*(1-m1)*e
    P(Y=1, T*=0 | x) = r1*m1*e + m0*(1-e)
    P(Y=0, T*=0 | x) = r0*(1-m1)*e + (1-m0)*(1-e)

In both directions the four cells sum to one for any parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .data_model import (
    BiasDirection,
    CaseControlData,
    DegenerateData,
    EstimateResult,
    EstimationError,
    Method,
    RecallBias,
)
from .glm import add_intercept, expit, fit_logistic

GRADIENT_TOL = 1e-6  # sup-norm required for a start to count as converged
_UNDERFLOW_FLOOR = 1e-250


class NonConvergence(EstimationError):
    """No optimizer start reached the gradient tolerance."""


class DegenerateLikelihood(EstimationError):
    """A fitted joint probability underflowed."""


class DegenerateMarginal(EstimationError):
    """A marginal outcome probability left (0, 1); the odds ratio is undefined."""


@dataclass(frozen=True)
class MlParams:
    """Exposure-model and outcome-model coefficients.

    ``beta`` has length p+1 (intercept first).  With a shared outcome model
    (the default) ``gamma`` has length p+2: intercept, covariate effects,
    then the exposure main effect.  With ``separate_outcomes`` the two
    outcome models get their own p+1 coefficient vectors and ``gamma`` is
    their concatenation (unexposed first).
    """

    beta: np.ndarray
    gamma: np.ndarray
    separate_outcomes: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        k = self.beta.size
        expected = 2 * k if self.separate_outcomes else k + 1
        if self.gamma.size != expected:
            raise ValueError(
                f"gamma has length {self.gamma.size}, expected {expected} "
                f"for beta of length {k}"
            )

    def outcome_linear_predictors(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Linear predictors of m0 and m1 for a design matrix with intercept."""
        if self.separate_outcomes:
            k = self.beta.size
            return X @ self.gamma[:k], X @ self.gamma[k:]
        eta0 = X @ self.gamma[:-1]
        return eta0, eta0 + self.gamma[-1]

    def outcome_probs(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eta0, eta1 = self.outcome_linear_predictors(X)
        return expit(eta0), expit(eta1)

    def exposure_probs(self, X: np.ndarray) -> np.ndarray:
        return expit(X @ self.beta)


def _cell_probability(y, t_star, m1, m0, e, bias: RecallBias):
    """Joint probability P(Y=y, T*=t_star | x), vectorized over records."""
    my1 = np.where(y == 1, m1, 1.0 - m1)  # P(Y=y | T=1, x)
    my0 = np.where(y == 1, m0, 1.0 - m0)  # P(Y=y | T=0, x)
    rate = np.where(y == 1, bias.theta_case, bias.theta_control)
    if bias.direction == BiasDirection.UNDER_REPORTING:
        return np.where(
            t_star == 1,
            (1.0 - rate) * my1 * e,
            rate * my1 * e + my0 * (1.0 - e),
        )
    # over-reporting covers the no-bias case (both rates zero)
    return np.where(
        t_star == 1,
        my1 * e + rate * my0 * (1.0 - e),
        (1.0 - rate) * my0 * (1.0 - e),
    )


def joint_prob(y: int, t_star: int, x, params: MlParams, bias: RecallBias) -> float:
    """P(Y=y, T*=t_star | X=x) under the given parameters and bias model.

    The four values over (y, t_star) sum to one for any inputs.
    """
    if y not in (0, 1) or t_star not in (0, 1):
        raise ValueError("y and t_star must be 0 or 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != params.beta.size - 1:
        raise ValueError(f"expected {params.beta.size - 1} covariates, got {x.size}")
    X = add_intercept(x.reshape(1, -1))
    m0, m1 = params.outcome_probs(X)
    e = params.exposure_probs(X)
    return float(
        _cell_probability(np.array([y]), np.array([t_star]), m1, m0, e, bias)[0]
    )


def _nll_and_grad(theta, X, y, t_star, bias: RecallBias, separate: bool):
    """Negative log-likelihood and its gradient, vectorized over records.

    The chain rule runs through the three fitted probabilities: for each
    record the cell probability L is linear in each of m1, m0 and e, so
    dL/dm1, dL/dm0 and dL/de follow directly from the cell formulas above.
    """
    k = X.shape[1]
    beta = theta[:k]
    e = expit(X @ beta)
    if separate:
        g0, g1 = theta[k : 2 * k], theta[2 * k :]
        m0, m1 = expit(X @ g0), expit(X @ g1)
    else:
        eta0 = X @ theta[k : 2 * k]
        m0, m1 = expit(eta0), expit(eta0 + theta[-1])

    rate = np.where(y == 1, bias.theta_case, bias.theta_control)
    sy = np.where(y == 1, 1.0, -1.0)  # d my_t / d m_t
    my1 = np.where(y == 1, m1, 1.0 - m1)
    my0 = np.where(y == 1, m0, 1.0 - m0)
    t1 = t_star == 1
    if bias.direction == BiasDirection.UNDER_REPORTING:
        L = np.where(t1, (1.0 - rate) * my1 * e, rate * my1 * e + my0 * (1.0 - e))
        dL_dm1 = sy * np.where(t1, (1.0 - rate) * e, rate * e)
        dL_dm0 = sy * np.where(t1, 0.0, 1.0 - e)
        dL_de = np.where(t1, (1.0 - rate) * my1, rate * my1 - my0)
    else:
        L = np.where(t1, my1 * e + rate * my0 * (1.0 - e), (1.0 - rate) * my0 * (1.0 - e))
        dL_dm1 = sy * np.where(t1, e, 0.0)
        dL_dm0 = sy * np.where(t1, rate * (1.0 - e), (1.0 - rate) * (1.0 - e))
        dL_de = np.where(t1, my1 - rate * my0, -(1.0 - rate) * my0)

    L = np.clip(L, 1e-300, None)
    inv = 1.0 / L
    w_e = inv * dL_de * e * (1.0 - e)
    w_m1 = inv * dL_dm1 * m1 * (1.0 - m1)
    w_m0 = inv * dL_dm0 * m0 * (1.0 - m0)
    grad_beta = X.T @ w_e
    if separate:
        grad = np.concatenate([grad_beta, X.T @ w_m0, X.T @ w_m1])
    else:
        grad = np.concatenate([grad_beta, X.T @ (w_m0 + w_m1), [np.sum(w_m1)]])
    return -float(np.sum(np.log(L))), -grad


def _warm_start(X, y, t_star, separate: bool) -> np.ndarray | None:
    """Crude-fit start: logistic T* ~ X for beta, Y ~ (X, T*) for gamma."""
    try:
        bfit = fit_logistic(X, t_star)
        gfit = fit_logistic(np.hstack([X, t_star[:, None].astype(float)]), y)
    except EstimationError:
        return None
    if separate:
        g0 = gfit.coefficients[:-1].copy()
        g1 = g0.copy()
        g1[0] += gfit.coefficients[-1]
        return np.concatenate([bfit.coefficients, g0, g1])
    return np.concatenate([bfit.coefficients, gfit.coefficients])


def fit_ml(
    data: CaseControlData,
    bias: RecallBias,
    separate_outcomes: bool = False,
) -> MlParams:
    """Fit the observed-data likelihood by quasi-Newton multi-start.

    Three starts are tried (zeros, a crude-fit warm start, and a perturbed
    warm start) and the best log-likelihood among converged starts is kept.
    Convergence requires the gradient sup-norm to reach GRADIENT_TOL.
    """
    params, _ = _fit_ml_diagnosed(data, bias, separate_outcomes)
    return params


def _standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-covariate centering/scaling used only inside the optimizer."""
    if x.shape[1] == 0:
        return np.empty(0), np.empty(0)
    means = x.mean(axis=0)
    scales = x.std(axis=0)
    scales[scales == 0.0] = 1.0  # constant columns fail later as singular designs
    return means, scales


def _coef_to_original(coef: np.ndarray, means: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Map [intercept, covariate effects] from standardized to original scale."""
    out = coef.copy()
    if means.size:
        out[1 : 1 + means.size] = coef[1 : 1 + means.size] / scales
        out[0] = coef[0] - float(np.sum(coef[1 : 1 + means.size] * means / scales))
    return out


def _fit_ml_diagnosed(data, bias, separate_outcomes):
    data.require_estimable()
    if data.t_star.min() == data.t_star.max():
        raise DegenerateData("reported exposure is constant; exposure model undefined")
    # optimize on standardized covariates (conditioning), report original scale
    means, scales = _standardization(data.x)
    X = add_intercept((data.x - means) / scales if means.size else data.x)
    y = data.y.astype(np.float64)
    t = data.t_star.astype(np.float64)
    k = X.shape[1]
    n_par = 3 * k if separate_outcomes else 2 * k + 1

    starts = [np.zeros(n_par)]
    warm = _warm_start(X, y, t, separate_outcomes)
    if warm is not None:
        starts.append(warm)
        # deterministic perturbation: fit_ml stays a pure function of its inputs
        starts.append(warm + np.random.default_rng(0).normal(0.0, 0.25, n_par))

    best = None
    best_grad = np.inf
    n_converged = 0
    args = (X, y, t, bias, separate_outcomes)
    for start in starts:
        res = minimize(
            _nll_and_grad,
            start,
            args=args,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 500, "gtol": 1e-9, "ftol": 1e-15},
        )
        # near the optimum the remaining improvement in the objective drops
        # below double precision before the gradient does; polish with Newton
        # steps on the analytic gradient, which needs no f comparisons
        theta, gnorm = _newton_polish(res.x, args)
        nll = _nll_and_grad(theta, *args)[0]
        if gnorm <= GRADIENT_TOL:
            n_converged += 1
            if best is None or nll < best[1]:
                best, best_grad = (theta, nll, res.nit), gnorm
    if best is None:
        raise NonConvergence(
            f"no start reached gradient sup-norm {GRADIENT_TOL:g} "
            f"({len(starts)} starts tried)"
        )

    params = _unpack(best[0], k, separate_outcomes, means, scales)
    m0, m1 = params.outcome_probs(add_intercept(data.x))
    e = params.exposure_probs(add_intercept(data.x))
    fitted = _cell_probability(data.y, data.t_star, m1, m0, e, bias)
    if np.min(fitted) <= _UNDERFLOW_FLOOR:
        raise DegenerateLikelihood("a fitted joint probability underflowed")
    diagnostics = {
        "iterations": float(best[2]),
        "grad_sup_norm": best_grad,
        "n_starts_converged": float(n_converged),
    }
    return params, diagnostics


def _newton_polish(theta, args, max_steps=4, fd_step=1e-6):
    """Drive the gradient sup-norm down with damped Newton steps.

    The Hessian is a central finite difference of the analytic gradient; a
    step is kept only if it shrinks the gradient sup-norm, so a bad Hessian
    can never make things worse.
    """
    grad = _nll_and_grad(theta, *args)[1]
    gnorm = float(np.max(np.abs(grad)))
    for _ in range(max_steps):
        if gnorm <= GRADIENT_TOL:
            break
        k = theta.size
        hessian = np.empty((k, k))
        for j in range(k):
            e = np.zeros(k)
            e[j] = fd_step
            hessian[:, j] = (
                _nll_and_grad(theta + e, *args)[1] - _nll_and_grad(theta - e, *args)[1]
            ) / (2.0 * fd_step)
        hessian = 0.5 * (hessian + hessian.T)
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            break
        candidate = theta - step
        cand_grad = _nll_and_grad(candidate, *args)[1]
        cand_norm = float(np.max(np.abs(cand_grad)))
        if cand_norm >= gnorm:
            break
        theta, grad, gnorm = candidate, cand_grad, cand_norm
    return theta, gnorm


def _unpack(theta, k, separate, means, scales):
    beta = _coef_to_original(theta[:k], means, scales)
    if separate:
        gamma = np.concatenate([
            _coef_to_original(theta[k : 2 * k], means, scales),
            _coef_to_original(theta[2 * k :], means, scales),
        ])
    else:
        gamma = np.concatenate([
            _coef_to_original(theta[k : 2 * k], means, scales), theta[-1:]
        ])
    return MlParams(beta, gamma, separate_outcomes=separate)


def ml_marginal_cor(
    data: CaseControlData,
    bias: RecallBias,
    separate_outcomes: bool = False,
) -> EstimateResult:
    """Marginal causal odds ratio by likelihood fitting plus g-computation.

    The fitted outcome probabilities m1(x) and m0(x) are averaged over all
    records; the exposure-model coefficients act as nuisance parameters.
    """
    params, diagnostics = _fit_ml_diagnosed(data, bias, separate_outcomes)
    m0, m1 = params.outcome_probs(add_intercept(data.x))
    p1, p0 = float(np.mean(m1)), float(np.mean(m0))
    if not (0.0 < p0 < 1.0 and 0.0 < p1 < 1.0):
        raise DegenerateMarginal(
            f"marginal outcome probabilities ({p0:.3g}, {p1:.3g}) must lie in (0, 1)"
        )
    log_psi = float(np.log(p1) + np.log1p(-p0) - np.log(p0) - np.log1p(-p1))
    diagnostics.update({"p1_hat": p1, "p0_hat": p0})
    return EstimateResult(log_psi=log_psi, method=Method.ML, bias=bias, diagnostics=diagnostics)
