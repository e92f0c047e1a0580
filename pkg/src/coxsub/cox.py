"""Full-data Cox partial likelihood: risk sums, score, Hessian, Newton solver,
and the Breslow cumulative baseline hazard.

All passes share one layout: records sorted by ascending time (events first at
ties), suffix cumulative sums of ``exp(eta)``-weighted covariate moments
evaluated at the risk-set boundary of each distinct event time.  Exponentials
are stabilized by subtracting a shift (by default ``max eta``) before
exponentiation; the shift is carried alongside every stored sum so ratios and
log terms are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import SortedCohort
from .errors import ConvergenceError, EstimationError, SingularHessianError

__all__ = [
    "RiskSetSums",
    "CoxFit",
    "BaselineHazard",
    "SolverOptions",
    "linear_predictors",
    "risk_set_sums",
    "log_partial_likelihood",
    "score_and_hessian",
    "newton_solve",
    "breslow",
]


@dataclass(frozen=True)
class SolverOptions:
    """Newton solver controls (shared by the full-data and weighted solvers)."""

    max_iter: int = 50
    score_tol: float = 1e-8
    step_tol: float = 1e-10
    max_halvings: int = 20


@dataclass(frozen=True)
class RiskSetSums:
    """Risk-set covariate moments at each distinct event time.

    ``s0``, ``s1``, ``s2`` store the order-0/1/2 moments on the shifted scale:
    the true moment ``S(k)(beta, t_k)`` equals ``exp(shift) * stored``.  Ratios
    (``zbar``, ``s2/s0``) are shift-free.
    """

    event_times: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    shift: float

    @property
    def zbar(self) -> np.ndarray:
        """Risk-set covariate mean ``S(1)/S(0)`` at each event time."""
        return self.s1 / self.s0[:, None]


@dataclass(frozen=True)
class CoxFit:
    """Converged partial-likelihood estimate with curvature at the solution."""

    beta: np.ndarray
    loglik: float
    score_norm: float
    hessian: np.ndarray
    iterations: int
    converged: bool

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "loglik": float(self.loglik),
            "score_norm": float(self.score_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step estimate of the cumulative baseline hazard."""

    times: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cumulative is None:
            object.__setattr__(self, "cumulative", np.cumsum(self.increments))

    def evaluate(self, t):
        """Cumulative hazard at time(s) ``t``; 0 before the first jump."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate(([0.0], self.cumulative))
        out = padded[idx]
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "increments": [float(v) for v in self.increments],
        }


def _check_beta(cohort: SortedCohort, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (cohort.p,):
        raise ValueError(f"beta must have shape ({cohort.p},), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise EstimationError("beta contains non-finite entries")
    return beta


def _suffix_cumsum(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values[::-1], axis=0)[::-1]


def linear_predictors(cohort: SortedCohort, beta):
    """Linear predictors ``eta_i = beta . Z_i`` in original record order.

    Returns ``(eta, eta_max)``; the maximum is the stabilization shift used
    before exponentiation downstream.
    """
    beta = _check_beta(cohort, beta)
    eta = cohort.base.covariates @ beta
    if not np.all(np.isfinite(eta)):
        raise EstimationError("non-finite linear predictor")
    return eta, float(eta.max())


def _event_sums(cohort: SortedCohort, beta, shift=None, order=1):
    """Shifted raw suffix sums at event-time boundaries.

    Returns ``(eta_sorted, m, s0raw, s1raw[, s2raw_packed, iu, ju])`` where
    ``s0raw[k] = sum_{j at risk at t_k} exp(eta_j - m)`` and the higher orders
    carry covariate factors.  Raw means not divided by n.
    """
    beta = _check_beta(cohort, beta)
    if cohort.event_times.size == 0:
        raise EstimationError("zero events")
    z = cohort.covariates_sorted
    eta = z @ beta
    if not np.all(np.isfinite(eta)):
        raise EstimationError("non-finite linear predictor")
    m = float(eta.max()) if shift is None else float(shift)
    w = np.exp(eta - m)
    b = cohort.risk_boundary
    s0raw = _suffix_cumsum(w)[b]
    if np.any(s0raw <= 0.0):
        raise EstimationError("risk-set sum underflowed to zero; shift too far from eta")
    s1raw = _suffix_cumsum(w[:, None] * z)[b]
    if order < 2:
        return eta, m, w, s0raw, s1raw
    iu, ju = np.triu_indices(cohort.p)
    s2raw = _suffix_cumsum((w[:, None] * z[:, iu]) * z[:, ju])[b]
    return eta, m, w, s0raw, s1raw, s2raw, iu, ju


def risk_set_sums(cohort: SortedCohort, beta, shift=None) -> RiskSetSums:
    """Order-0/1/2 risk-set moments ``S(k)(beta, t_k)`` at every event time.

    Stored on the shifted scale (see ``RiskSetSums``); one reverse pass over
    the sorted records.
    """
    eta, m, _, s0raw, s1raw, s2raw, iu, ju = _event_sums(cohort, beta, shift, order=2)
    n = cohort.n
    p = cohort.p
    k = cohort.event_times.size
    s2 = np.empty((k, p, p))
    s2[:, iu, ju] = s2raw / n
    s2[:, ju, iu] = s2raw / n
    return RiskSetSums(
        event_times=cohort.event_times,
        s0=s0raw / n,
        s1=s1raw / n,
        s2=s2,
        shift=m,
    )


def _loglik_from_sums(cohort: SortedCohort, eta, m, s0raw) -> float:
    ev = cohort.event_rows
    d = cohort.event_counts
    return float((eta[ev].sum() - m * ev.size - d @ np.log(s0raw)) / cohort.n)


def _loglik(cohort: SortedCohort, beta, shift=None) -> float:
    if cohort.event_times.size == 0:  # empty sum over events
        _check_beta(cohort, beta)
        return 0.0
    eta, m, _, s0raw, _ = _event_sums(cohort, beta, shift, order=1)
    return _loglik_from_sums(cohort, eta, m, s0raw)


def log_partial_likelihood(cohort: SortedCohort, beta) -> float:
    """Average log-partial likelihood ``(1/n) sum_i l_i(beta)``."""
    value = _loglik(cohort, beta)
    if not np.isfinite(value):
        raise EstimationError("log partial likelihood is not finite")
    return value


def _score_hessian(cohort: SortedCohort, beta, shift=None, with_loglik=False):
    eta, m, _, s0raw, s1raw, s2raw, iu, ju = _event_sums(cohort, beta, shift, order=2)
    n = cohort.n
    p = cohort.p
    d = cohort.event_counts.astype(float)
    ev = cohort.event_rows
    zbar = s1raw / s0raw[:, None]
    z_ev = cohort.covariates_sorted[ev]
    score = (z_ev.sum(axis=0) - d @ zbar) / n
    hpack = d @ (s2raw / s0raw[:, None] - zbar[:, iu] * zbar[:, ju])
    hessian = np.empty((p, p))
    hessian[iu, ju] = hpack / n
    hessian[ju, iu] = hpack / n
    if with_loglik:
        return score, hessian, _loglik_from_sums(cohort, eta, m, s0raw)
    return score, hessian


def score_and_hessian(cohort: SortedCohort, beta):
    """Score ``U(beta)`` and the (positive semidefinite) curvature matrix.

    The Hessian returned is ``-d U / d beta``: the average over events of the
    risk-set covariate covariance.
    """
    return _score_hessian(cohort, beta)


def _solve_spd(a: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise EstimationError("non-finite Hessian")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SingularHessianError("Hessian singular") from None
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def _newton_loop(beta, full_eval, ll_eval, opts: SolverOptions):
    """Shared Newton/step-halving loop for the plain and weighted solvers.

    ``full_eval(beta) -> (score, hessian, loglik)``; ``ll_eval(beta) -> float``
    (may raise ``EstimationError`` for unevaluable points, treated as -inf).
    Returns ``(beta, loglik, score, hessian, iterations)`` on convergence.
    """
    score, hessian, loglik = full_eval(beta)
    trace = [loglik]
    iterations = 0
    converged = False
    for _ in range(opts.max_iter):
        score_norm = float(np.abs(score).max())
        if score_norm <= opts.score_tol:
            converged = True
            break
        step = _solve_spd(hessian, score)
        if float(np.abs(step).max()) <= opts.step_tol:
            converged = True
            break
        scale = 1.0
        accepted = False
        for _ in range(opts.max_halvings + 1):
            candidate = beta + scale * step
            try:
                cand_ll = ll_eval(candidate)
            except EstimationError:
                cand_ll = -np.inf
            if np.isfinite(cand_ll) and cand_ll >= loglik:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if float(np.abs(scale * 2.0 * step).max()) <= opts.step_tol:
                converged = True  # step shrank to noise at the optimum
                break
            raise ConvergenceError(
                "step halving exhausted without likelihood increase",
                beta=beta,
                score_norm=score_norm,
                iterations=iterations,
                trace=trace,
            )
        beta = candidate
        score, hessian, loglik = full_eval(beta)
        trace.append(loglik)
        iterations += 1
    if not converged and float(np.abs(score).max()) <= opts.score_tol:
        converged = True
    if not converged:
        raise ConvergenceError(
            f"no convergence after {opts.max_iter} iterations",
            beta=beta,
            score_norm=float(np.abs(score).max()),
            iterations=iterations,
            trace=trace,
        )
    # a degenerate design (e.g. constant covariate) converges with an
    # identically zero score but carries no curvature; reject it here
    if not np.all(np.isfinite(hessian)):
        raise EstimationError("non-finite Hessian")
    try:
        np.linalg.cholesky(hessian)
    except np.linalg.LinAlgError:
        raise SingularHessianError("Hessian singular") from None
    return beta, float(loglik), score, hessian, iterations


def newton_solve(cohort: SortedCohort, beta_init=None, options: SolverOptions | None = None) -> CoxFit:
    """Maximize the partial likelihood by Newton iteration with step halving.

    Converges when the max-abs score falls below ``options.score_tol`` or the
    proposed step below ``options.step_tol``.  A step is halved while it
    decreases the log-likelihood (up to ``max_halvings``, then the solve
    fails); failures raise ``ConvergenceError`` carrying the last iterate.
    """
    opts = options or SolverOptions()
    if cohort.event_times.size == 0:
        raise EstimationError("zero events")
    beta = (
        np.zeros(cohort.p)
        if beta_init is None
        else _check_beta(cohort, beta_init).copy()
    )

    def full_eval(b):
        score, hessian, loglik = _score_hessian(cohort, b, with_loglik=True)
        return score, hessian, loglik

    beta, loglik, score, hessian, iterations = _newton_loop(
        beta, full_eval, lambda b: _loglik(cohort, b), opts
    )
    return CoxFit(
        beta=beta,
        loglik=loglik,
        score_norm=float(np.abs(score).max()),
        hessian=hessian,
        iterations=iterations,
        converged=True,
    )


def _breslow_arrays(cohort: SortedCohort, beta, shift=None):
    if cohort.event_times.size == 0:
        return np.empty(0), np.empty(0)
    _, m, _, s0raw, _ = _event_sums(cohort, beta, shift, order=1)
    d = cohort.event_counts.astype(float)
    # plain ratio keeps the beta = 0 reduction to d_k / n_k exact
    increments = (d / s0raw) * math.exp(-m)
    return cohort.event_times.astype(float), increments


def breslow(cohort: SortedCohort, beta) -> BaselineHazard:
    """Breslow estimate of the cumulative baseline hazard at ``beta``.

    Each distinct event time contributes ``d_k / sum_{at risk} exp(eta_j)``;
    at ``beta = 0`` this is exactly the Nelson-Aalen estimator.
    """
    _check_beta(cohort, beta)
    times, increments = _breslow_arrays(cohort, beta)
    return BaselineHazard(times=times, increments=increments)
