"""Inverse-probability-weighted estimation on a drawn subsample.

Every drawn record enters with weight ``1/(n * r * prob)``.  The weighted
score, curvature, baseline hazard, and the sandwich covariance are computed
with the same sorted-suffix machinery as the full-data module; the identity
subsample (every record once, probability ``1/n``, ``r = n``) reproduces the
full-data quantities exactly.

The sandwich covariance is already on the scale of the deviation between the
subsample estimate and the full-data estimate: standard errors are square
roots of its diagonal with no further division by the subsample size.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from .cox import SolverOptions, _check_beta, _newton_loop, _solve_spd, _suffix_cumsum
from .data import SortedCohort
from .errors import CoxSubError, EstimationError
from .sampling import (
    SamplingMethod,
    Subsample,
    cenopt_probs,
    draw_subsample,
    fullopt_probs,
    pilot_stage,
    uniform_probs,
)

__all__ = [
    "WeightedRiskSums",
    "WeightedFit",
    "WeightedBaseline",
    "LambdaVariance",
    "weighted_risk_sums",
    "weighted_log_likelihood",
    "weighted_score_hessian",
    "weighted_newton",
    "sandwich_variance",
    "weighted_breslow",
    "confidence_intervals",
    "normal_quantile",
    "run_algorithm1",
    "run_report",
]


@dataclass(frozen=True)
class WeightedRiskSums:
    """Weighted risk-set moments at each subsample event time (shifted scale)."""

    event_times: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    shift: float

    @property
    def zbar(self) -> np.ndarray:
        return self.s1 / self.s0[:, None]


@dataclass(frozen=True)
class WeightedFit:
    """Subsample estimate with curvature and (optional) sandwich covariance."""

    beta: np.ndarray
    h_tilde: np.ndarray
    score_norm: float
    iterations: int
    converged: bool
    sigma: np.ndarray | None = None
    v_tilde: np.ndarray | None = None
    pilot_beta: np.ndarray | None = None

    def se(self) -> np.ndarray:
        if self.sigma is None:
            raise ValueError("fit carries no covariance; run sandwich_variance first")
        return np.sqrt(np.diag(self.sigma))


class _WeightedDesign:
    """Subsample rows sorted by time (events first at ties) with draw weights."""

    def __init__(self, sub: Subsample, cohort: SortedCohort):
        base = cohort.base
        idx = np.asarray(sub.indices, dtype=np.intp)
        if idx.size != sub.r:
            raise ValueError("subsample index count must equal r")
        if idx.min() < 0 or idx.max() >= base.n:
            raise ValueError("subsample indices out of range")
        u = 1.0 / (base.n * sub.r * np.asarray(sub.probs_at_draw, dtype=float))
        time = base.time[idx]
        status = base.status[idx]
        order = np.lexsort((1 - status, time))
        self.n = base.n
        self.r = sub.r
        self.p = base.p
        self.z = base.covariates[idx][order]
        self.time = time[order]
        self.status = status[order]
        self.u = u[order]
        self.event_rows = np.flatnonzero(self.status == 1)
        if self.event_rows.size == 0:
            raise EstimationError("subsample has no events")
        self.event_times = np.unique(self.time[self.event_rows])
        self.boundary = np.searchsorted(self.time, self.event_times, side="left")
        self.event_group = np.searchsorted(
            self.event_times, self.time[self.event_rows], side="left"
        )
        # weighted event mass per distinct event time (the jump of the
        # weighted counting-process average)
        mass = np.zeros(self.event_times.size)
        np.add.at(mass, self.event_group, self.u[self.event_rows])
        self.event_mass = mass

    def sums(self, beta, shift=None, order=1):
        eta = self.z @ beta
        if not np.all(np.isfinite(eta)):
            raise EstimationError("non-finite linear predictor")
        m = float(eta.max()) if shift is None else float(shift)
        w = self.u * np.exp(eta - m)
        b = self.boundary
        s0raw = _suffix_cumsum(w)[b]
        if np.any(s0raw <= 0.0):
            raise EstimationError("weighted risk-set sum underflowed to zero")
        s1raw = _suffix_cumsum(w[:, None] * self.z)[b]
        if order < 2:
            return eta, m, s0raw, s1raw
        iu, ju = np.triu_indices(self.p)
        s2raw = _suffix_cumsum((w[:, None] * self.z[:, iu]) * self.z[:, ju])[b]
        return eta, m, s0raw, s1raw, s2raw, iu, ju

    def loglik(self, beta, shift=None) -> float:
        eta, m, s0raw, _ = self.sums(beta, shift, order=1)
        ev = self.event_rows
        return float(
            self.u[ev] @ (eta[ev] - m)
            - self.event_mass @ (np.log(s0raw) + math.log(self.n))
        )

    def score_hessian(self, beta, shift=None, with_loglik=False):
        eta, m, s0raw, s1raw, s2raw, iu, ju = self.sums(beta, shift, order=2)
        ev = self.event_rows
        u_ev = self.u[ev]
        zbar = s1raw / s0raw[:, None]
        score = u_ev @ self.z[ev] - self.event_mass @ zbar
        hpack = self.event_mass @ (s2raw / s0raw[:, None] - zbar[:, iu] * zbar[:, ju])
        hessian = np.empty((self.p, self.p))
        hessian[iu, ju] = hpack
        hessian[ju, iu] = hpack
        if with_loglik:
            loglik = float(
                u_ev @ (eta[ev] - m)
                - self.event_mass @ (np.log(s0raw) + math.log(self.n))
            )
            return score, hessian, loglik
        return score, hessian


def weighted_risk_sums(sub: Subsample, cohort: SortedCohort, beta) -> WeightedRiskSums:
    """Weighted moments ``S*(k)(beta, t)`` at each subsample event time.

    Includes the ``1/(n r prob)`` weights, so the identity subsample
    reproduces the full-data moments exactly.
    """
    beta = _check_beta(cohort, beta)
    design = _WeightedDesign(sub, cohort)
    eta, m, s0raw, s1raw, s2raw, iu, ju = design.sums(beta, order=2)
    del eta
    k = design.event_times.size
    s2 = np.empty((k, design.p, design.p))
    s2[:, iu, ju] = s2raw
    s2[:, ju, iu] = s2raw
    return WeightedRiskSums(
        event_times=design.event_times, s0=s0raw, s1=s1raw, s2=s2, shift=m
    )


def weighted_log_likelihood(sub: Subsample, cohort: SortedCohort, beta) -> float:
    """Weighted log partial likelihood of the subsample.

    Normalized so the identity subsample gives the full-data value (the
    normalization shifts the objective by a constant; its maximizer and score
    are unchanged).
    """
    beta = _check_beta(cohort, beta)
    value = _WeightedDesign(sub, cohort).loglik(beta)
    if not np.isfinite(value):
        raise EstimationError("weighted log likelihood is not finite")
    return value


def weighted_score_hessian(sub: Subsample, cohort: SortedCohort, beta):
    """Weighted score and its negated derivative at ``beta``."""
    beta = _check_beta(cohort, beta)
    return _WeightedDesign(sub, cohort).score_hessian(beta)


def weighted_newton(sub: Subsample, cohort: SortedCohort, beta_init=None,
                    options: SolverOptions | None = None) -> WeightedFit:
    """Solve the weighted estimating equation by Newton iteration.

    Same tolerances and step-halving policy as the full-data solver.  The
    returned curvature ``h_tilde`` carries the ``1/(n r prob)`` event weights
    evaluated at the solution.
    """
    opts = options or SolverOptions()
    design = _WeightedDesign(sub, cohort)
    beta = (
        np.zeros(cohort.p)
        if beta_init is None
        else _check_beta(cohort, beta_init).copy()
    )
    beta, _, score, hessian, iterations = _newton_loop(
        beta,
        lambda b: design.score_hessian(b, with_loglik=True),
        design.loglik,
        opts,
    )
    return WeightedFit(
        beta=beta,
        h_tilde=hessian,
        score_norm=float(np.abs(score).max()),
        iterations=iterations,
        converged=True,
    )


def _draw_residuals(design: _WeightedDesign, beta):
    """Per-draw score residuals: event term minus the risk-set compensator.

    ``psi_i = delta_i (Z_i - zbar*(X_i)) - qtilde_i`` where ``qtilde_i`` is the
    draw's influence through the weighted risk sets, the subsample analogue of
    the full-data influence score.  The draw-weighted sum of the residuals is
    exactly the weighted score; their squared-weight outer products form the
    sandwich middle.
    """
    eta, m, s0raw, s1raw = design.sums(beta, order=1)
    zbar = s1raw / s0raw[:, None]
    inc = design.event_mass / s0raw  # shifted-scale jumps of the weighted hazard
    a_prefix = np.cumsum(inc)
    b_prefix = np.cumsum(inc[:, None] * zbar, axis=0)
    pos = np.searchsorted(design.event_times, design.time, side="right") - 1
    psi = np.zeros_like(design.z)
    has = pos >= 0
    idx = pos[has]
    psi[has] = -np.exp(eta[has] - m)[:, None] * (
        design.z[has] * a_prefix[idx, None] - b_prefix[idx]
    )
    ev = design.event_rows
    psi[ev] += design.z[ev] - zbar[design.event_group]
    return psi


def sandwich_variance(sub: Subsample, cohort: SortedCohort, beta, h_tilde):
    """Sandwich covariance of the subsample estimate about the full-data one.

    The middle term sums squared draw weights over per-draw score residuals:
    ``V = sum_i u_i^2 psi_i psi_i'`` with ``u_i = 1/(n r prob_i)`` and
    ``psi_i`` the draw's full score contribution (its event term minus its
    pull on the weighted risk sets).  The covariance ``H~^-1 V H~^-1``
    directly estimates the variance of the estimate deviation (no division
    by r).
    """
    beta = _check_beta(cohort, beta)
    design = _WeightedDesign(sub, cohort)
    psi = _draw_residuals(design, beta)
    weighted = psi * (design.u**2)[:, None]
    v_tilde = weighted.T @ psi
    v_tilde = 0.5 * (v_tilde + v_tilde.T)
    inner = _solve_spd(h_tilde, v_tilde)
    sigma = _solve_spd(h_tilde, inner.T).T
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, v_tilde


@dataclass(frozen=True)
class LambdaVariance:
    """Pointwise variance of the weighted baseline-hazard estimate.

    Components follow the estimate-deviation decomposition: a coefficient
    part ``gamma(t)' sigma gamma(t)``, a direct sampling part ``psi(t)``, and
    their cross term ``gamma(t)' hinv_phi``.  All prefix arrays live on the
    shifted scale with ``shift`` carried separately.
    """

    times: np.ndarray
    shift: float
    gamma_prefix: np.ndarray
    psi1_prefix: np.ndarray
    c_prefix: np.ndarray
    draw_u2: np.ndarray
    draw_eta_shifted: np.ndarray
    draw_time: np.ndarray
    sigma: np.ndarray
    hinv_phi: np.ndarray
    phi: np.ndarray

    def _index(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="right")) - 1

    def gamma(self, t: float) -> np.ndarray:
        i = self._index(t)
        if i < 0:
            return np.zeros(self.gamma_prefix.shape[1])
        return math.exp(-self.shift) * self.gamma_prefix[i]

    def psi_term1(self, t: float) -> float:
        i = self._index(t)
        if i < 0:
            return 0.0
        return math.exp(-2.0 * self.shift) * float(self.psi1_prefix[i])

    def _psi_term2(self, t: float) -> float:
        cut = np.minimum(self.draw_time, t)
        pos = np.searchsorted(self.times, cut, side="right") - 1
        c = np.where(pos >= 0, self.c_prefix[np.maximum(pos, 0)], 0.0)
        scale = np.exp(2.0 * self.draw_eta_shifted)
        return float(np.sum(self.draw_u2 * scale * c * c))

    def psi(self, t: float) -> float:
        return self.psi_term1(t) + self._psi_term2(t)

    def variance(self, t: float) -> float:
        g = self.gamma(t)
        return float(g @ self.sigma @ g + self.psi(t) + g @ self.hinv_phi)

    __call__ = variance


@dataclass(frozen=True)
class WeightedBaseline:
    """Weighted Breslow step function, optionally with pointwise variance."""

    times: np.ndarray
    increments: np.ndarray
    cumulative: np.ndarray = field(default=None)
    lambda_variance: LambdaVariance | None = None

    def __post_init__(self):
        if self.cumulative is None:
            object.__setattr__(self, "cumulative", np.cumsum(self.increments))

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate(([0.0], self.cumulative))
        out = padded[idx]
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "times": [float(t) for t in self.times],
            "cumulative": [float(v) for v in self.cumulative],
        }


def weighted_breslow(sub: Subsample, cohort: SortedCohort, beta,
                     with_variance: bool = False, h_tilde=None, sigma=None) -> WeightedBaseline:
    """Weighted Breslow estimate of the cumulative baseline hazard.

    Jumps are inverse-probability-weighted event masses over weighted risk
    sums.  With ``with_variance`` the pointwise variance components are also
    assembled (reusing ``h_tilde``/``sigma`` when supplied, recomputing them
    otherwise with the same squared-weight pattern as the sandwich middle).
    """
    beta = _check_beta(cohort, beta)
    design = _WeightedDesign(sub, cohort)
    eta, m, s0raw, s1raw = design.sums(beta, order=1)
    # plain ratio so the identity subsample reproduces the full-data jumps exactly
    increments = (design.event_mass / s0raw) * math.exp(-m)
    baseline = WeightedBaseline(times=design.event_times.astype(float), increments=increments)
    if not with_variance:
        return baseline

    if h_tilde is None:
        _, h_tilde = design.score_hessian(beta)
    if sigma is None:
        sigma, _ = sandwich_variance(sub, cohort, beta, h_tilde)

    zbar = s1raw / s0raw[:, None]
    ev = design.event_rows
    g = design.event_group
    u2_ev = design.u[ev] ** 2
    gamma_prefix = np.cumsum(design.event_mass[:, None] * zbar / s0raw[:, None], axis=0)
    psi1_per_time = np.zeros(design.event_times.size)
    np.add.at(psi1_per_time, g, u2_ev)
    psi1_prefix = np.cumsum(psi1_per_time / s0raw**2)
    c_prefix = np.cumsum(design.event_mass / s0raw**2)
    phi_shift = ((design.z[ev] - zbar[g]) * (u2_ev / s0raw[g])[:, None]).sum(axis=0)
    phi = math.exp(-m) * phi_shift
    lam = LambdaVariance(
        times=design.event_times.astype(float),
        shift=m,
        gamma_prefix=gamma_prefix,
        psi1_prefix=psi1_prefix,
        c_prefix=c_prefix,
        draw_u2=design.u**2,
        draw_eta_shifted=eta - m,
        draw_time=design.time.astype(float),
        sigma=sigma,
        hinv_phi=_solve_spd(h_tilde, phi),
        phi=phi,
    )
    return replace(baseline, lambda_variance=lam)


# -- normal quantile ---------------------------------------------------------

_ACKLAM_A = (
    -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
    1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00,
)
_ACKLAM_B = (
    -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
    6.680131188771972e01, -1.328068155288572e01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
    -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
    3.754408661907416e00,
)


def normal_quantile(q: float) -> float:
    """Standard normal quantile, accurate to well below 1e-8.

    Rational initial approximation refined by one Halley step against the
    complementary error function.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("quantile argument must lie strictly between 0 and 1")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if q < p_low:
        s = math.sqrt(-2.0 * math.log(q))
        x = (((((c[0] * s + c[1]) * s + c[2]) * s + c[3]) * s + c[4]) * s + c[5]) / (
            (((d[0] * s + d[1]) * s + d[2]) * s + d[3]) * s + 1.0
        )
    elif q <= 1.0 - p_low:
        s = q - 0.5
        t = s * s
        x = (
            (((((a[0] * t + a[1]) * t + a[2]) * t + a[3]) * t + a[4]) * t + a[5])
            * s
            / (((((b[0] * t + b[1]) * t + b[2]) * t + b[3]) * t + b[4]) * t + 1.0)
        )
    else:
        s = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -(((((c[0] * s + c[1]) * s + c[2]) * s + c[3]) * s + c[4]) * s + c[5]) / (
            (((d[0] * s + d[1]) * s + d[2]) * s + d[3]) * s + 1.0
        )
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - q
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def confidence_intervals(fit: WeightedFit, level: float = 0.95):
    """Per-coordinate normal confidence intervals from the sandwich SEs."""
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie strictly between 0 and 1")
    z = normal_quantile(0.5 * (1.0 + level))
    half = z * fit.se()
    return fit.beta - half, fit.beta + half


# -- end-to-end driver -------------------------------------------------------


@contextmanager
def _stage(name: str):
    try:
        yield
    except CoxSubError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def run_algorithm1(cohort: SortedCohort, r: int, method, rng,
                   level: float = 0.95, with_variance: bool = False,
                   options: SolverOptions | None = None):
    """Two-stage optimal subsampling estimate of a Cox model.

    Pilot (stratified uniform, size ``r``) -> probabilities per ``method`` ->
    size-``r`` draw -> weighted Newton initialized at the pilot -> sandwich
    covariance -> weighted baseline hazard.  Errors carry the failing stage
    name.  Returns ``(WeightedFit, WeightedBaseline)``.
    """
    method = SamplingMethod(method)
    with _stage("pilot"):
        pilot_beta, _ = pilot_stage(cohort, r, rng)
    with _stage("probabilities"):
        if method is SamplingMethod.UNIFORM:
            plan = uniform_probs(cohort)
        elif method is SamplingMethod.FULL_OPT:
            plan = fullopt_probs(cohort, pilot_beta)
        else:
            plan = cenopt_probs(cohort, pilot_beta)
    with _stage("draw"):
        sub = draw_subsample(plan, r, rng)
    with _stage("fit"):
        fit = weighted_newton(sub, cohort, beta_init=pilot_beta, options=options)
    with _stage("variance"):
        sigma, v_tilde = sandwich_variance(sub, cohort, fit.beta, fit.h_tilde)
        fit = replace(fit, sigma=sigma, v_tilde=v_tilde, pilot_beta=pilot_beta)
    with _stage("baseline"):
        baseline = weighted_breslow(
            sub, cohort, fit.beta,
            with_variance=with_variance, h_tilde=fit.h_tilde, sigma=sigma,
        )
    return fit, baseline


def full_data_sandwich(cohort: SortedCohort, beta, hessian):
    """Sandwich covariance of the full-data fit with unit ``1/n`` weights.

    Uses per-record score residuals (event term minus the record's influence
    score), the same middle-term form as the subsample sandwich; standard
    errors are the square roots of ``diag(H^-1 V H^-1) / n``.  Returns
    ``(sigma, se)``.
    """
    from .sampling import _q_internals

    beta = _check_beta(cohort, beta)
    scores, zbar, last_event = _q_internals(cohort, beta)
    psi = -scores.q.copy()
    ev = cohort.s1_index
    psi[ev] += cohort.base.covariates[ev] - zbar[last_event[ev]]
    v = psi.T @ psi / cohort.n
    inner = _solve_spd(hessian, v)
    sigma = _solve_spd(hessian, inner.T).T
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, np.sqrt(np.diag(sigma) / cohort.n)


def run_report(fit: WeightedFit, baseline: WeightedBaseline, method, r: int,
               seed=None, level: float = 0.95) -> dict:
    """JSON-ready summary of one subsampling run."""
    lower, upper = confidence_intervals(fit, level)
    return {
        "beta": [float(v) for v in fit.beta],
        "sigma": [float(v) for v in np.asarray(fit.sigma).ravel()],
        "se": [float(v) for v in fit.se()],
        "ci_lower": [float(v) for v in lower],
        "ci_upper": [float(v) for v in upper],
        "method": SamplingMethod(method).value,
        "r": int(r),
        "seed": seed,
        "pilot_beta": None if fit.pilot_beta is None else [float(v) for v in fit.pilot_beta],
        "breslow": baseline.to_dict(),
    }
