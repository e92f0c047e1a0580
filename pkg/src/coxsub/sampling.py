"""Subsampling plans: influence scores, A-optimal probabilities, draws, pilot.

Probabilities are stratified by event status.  Censored records are weighted
by the norm of their influence score ``q_i`` (their cumulative pull on the
score through risk-set membership); event records additionally carry the
event-time term ``Z_i - zbar(X_i)``.  Stratum masses equal the event and
censoring fractions of the full data, so every subsample mirrors the full
censoring rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cox import _event_sums, newton_solve
from .data import SortedCohort, sort_cohort
from .errors import DegenerateStratumError, EstimationError, PilotError

__all__ = [
    "SamplingMethod",
    "QScores",
    "SubsamplingPlan",
    "Subsample",
    "q_scores",
    "fullopt_probs",
    "cenopt_probs",
    "uniform_probs",
    "draw_subsample",
    "pilot_stage",
]


class SamplingMethod(str, Enum):
    """Probability construction used for the second-stage draw."""

    UNIFORM = "Uniform"
    FULL_OPT = "FullOpt"
    CEN_OPT = "CenOpt"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class QScores:
    """Per-record influence vectors ``q_i`` and their Euclidean norms.

    Rows for records whose observed time precedes the first event time are
    exactly zero (they never enter a risk set at an event).
    """

    q: np.ndarray
    norms: np.ndarray


def _q_internals(cohort: SortedCohort, beta):
    """QScores plus the event-time grid quantities the probability formulas
    reuse: per-event-time covariate mean and each record's last-event index."""
    eta_sorted, m, _, s0raw, s1raw = _event_sums(cohort, beta, order=1)
    del eta_sorted
    d = cohort.event_counts.astype(float)
    zbar = s1raw / s0raw[:, None]
    # hazard-increment prefix sums on the shifted scale: the true increment is
    # d_k / (risk sum) = exp(-m) * d_k / s0raw_k; the record factor exp(eta - m)
    # cancels the shift exactly.
    inc = d / s0raw
    a_prefix = np.cumsum(inc)
    b_prefix = np.cumsum(inc[:, None] * zbar, axis=0)

    z = cohort.base.covariates
    last_event = np.searchsorted(cohort.event_times, cohort.base.time, side="right") - 1
    eta = z @ beta
    scale = np.exp(eta - m)
    q = np.zeros_like(z)
    has = last_event >= 0
    idx = last_event[has]
    q[has] = scale[has, None] * (z[has] * a_prefix[idx, None] - b_prefix[idx])
    norms = np.linalg.norm(q, axis=1)
    return QScores(q=q, norms=norms), zbar, last_event


def q_scores(cohort: SortedCohort, beta) -> QScores:
    """Influence score of every record at ``beta``.

    ``q_i = exp(beta.Z_i) * sum over event times t_k <= X_i of
    d_k * (Z_i - zbar(t_k)) / riskSum(t_k)``, evaluated with prefix sums over
    the event-time grid and a binary search of each ``X_i`` into it.
    """
    scores, _, _ = _q_internals(cohort, beta)
    return scores


@dataclass(frozen=True)
class SubsamplingPlan:
    """Per-record draw probabilities plus the stratified-draw contract.

    ``probs`` sums to one.  For the optimal plans the censored and event
    strata carry masses equal to the censoring and event rates; ``stratified``
    plans are drawn per stratum so the subsample event count is fixed at
    ``round(r * event_mass)``.
    """

    method: SamplingMethod
    probs: np.ndarray
    stratified: bool
    event_mass: float
    event_mask: np.ndarray

    def __post_init__(self):
        total = float(self.probs.sum())
        if self.probs.min() < 0 or abs(total - 1.0) > 1e-8:
            raise ValueError("plan probabilities must be nonnegative and sum to 1")

    def to_dict(self, include_probs: bool | None = None) -> dict:
        n = self.probs.size
        if include_probs is None:
            include_probs = n <= 100_000
        out = {
            "method": self.method.value,
            "stratified": bool(self.stratified),
            "n": int(n),
        }
        if include_probs:
            out["probs"] = [float(v) for v in self.probs]
        return out


@dataclass(frozen=True)
class Subsample:
    """Indices drawn with replacement and their plan probabilities."""

    indices: np.ndarray
    probs_at_draw: np.ndarray
    r: int
    source_n: int

    def __post_init__(self):
        if self.indices.shape != (self.r,) or self.probs_at_draw.shape != (self.r,):
            raise ValueError("subsample arrays must have length r")
        if np.any(self.probs_at_draw <= 0):
            raise ValueError("drawn probabilities must be positive")

    def to_dict(self) -> dict:
        return {
            "r": int(self.r),
            "source_n": int(self.source_n),
            "indices": [int(i) for i in self.indices],
            "probs_at_draw": [float(v) for v in self.probs_at_draw],
        }


def _stratum_warn(label: str) -> None:
    warnings.warn(
        f"{label} stratum is empty; its probability mass moves to the other stratum",
        RuntimeWarning,
        stacklevel=3,
    )


def _censored_stratum(norms_s0: np.ndarray, mass: float) -> np.ndarray:
    """Probabilities proportional to the influence norms, given stratum mass."""
    total = float(norms_s0.sum())
    if norms_s0.size and total <= 0.0:
        if mass > 0.0:
            raise DegenerateStratumError("degenerate censored stratum")
        return np.zeros_like(norms_s0)
    return mass * norms_s0 / total if norms_s0.size else norms_s0


def _make_plan(cohort: SortedCohort, method: SamplingMethod, probs: np.ndarray,
               stratified: bool) -> SubsamplingPlan:
    return SubsamplingPlan(
        method=method,
        probs=probs,
        stratified=stratified,
        event_mass=1.0 - cohort.censoring_rate,
        event_mask=cohort.base.status == 1,
    )


def fullopt_probs(cohort: SortedCohort, beta_pilot) -> SubsamplingPlan:
    """A-optimal probabilities on both strata.

    Censored records: proportional to ``|q_i|`` with total mass equal to the
    censoring rate.  Event records: proportional to
    ``sqrt(|Z_i - zbar(X_i)|^2 + |q_i|^2)`` with total mass the event rate.
    """
    scores, zbar, last_event = _q_internals(cohort, beta_pilot)
    s0, s1 = cohort.s0_index, cohort.s1_index
    delta_bar = 1.0 - cohort.censoring_rate
    if s0.size == 0:
        _stratum_warn("censored")
    if s1.size == 0:
        _stratum_warn("event")
    probs = np.zeros(cohort.n)
    probs[s0] = _censored_stratum(scores.norms[s0], cohort.censoring_rate)
    if s1.size:
        diff = cohort.base.covariates[s1] - zbar[last_event[s1]]
        weights = np.sqrt((diff * diff).sum(axis=1) + scores.norms[s1] ** 2)
        total = float(weights.sum())
        if total <= 0.0:
            warnings.warn(
                "event stratum has zero total weight; using uniform probabilities within it",
                RuntimeWarning,
                stacklevel=2,
            )
            probs[s1] = delta_bar / s1.size
        else:
            probs[s1] = delta_bar * weights / total
    return _make_plan(cohort, SamplingMethod.FULL_OPT, probs, stratified=True)


def cenopt_probs(cohort: SortedCohort, beta_pilot) -> SubsamplingPlan:
    """Optimal probabilities on the censored stratum, uniform on events.

    Event records share the event-rate mass equally (``1/n`` each); censored
    records follow the same influence-norm rule as the full optimal plan.
    """
    scores, _, _ = _q_internals(cohort, beta_pilot)
    s0, s1 = cohort.s0_index, cohort.s1_index
    if s0.size == 0:
        _stratum_warn("censored")
    if s1.size == 0:
        _stratum_warn("event")
    probs = np.zeros(cohort.n)
    probs[s0] = _censored_stratum(scores.norms[s0], cohort.censoring_rate)
    if s1.size:
        probs[s1] = (1.0 - cohort.censoring_rate) / s1.size
    return _make_plan(cohort, SamplingMethod.CEN_OPT, probs, stratified=True)


def uniform_probs(cohort: SortedCohort) -> SubsamplingPlan:
    """Uniform with-replacement probabilities ``1/n``, drawn unstratified."""
    probs = np.full(cohort.n, 1.0 / cohort.n)
    return _make_plan(cohort, SamplingMethod.UNIFORM, probs, stratified=False)


def _draw_categorical(probs: np.ndarray, members: np.ndarray, k: int, rng) -> np.ndarray:
    """k draws with replacement from probs restricted to members (renormalized)."""
    if k == 0:
        return np.empty(0, dtype=np.intp)
    weights = probs[members]
    cdf = np.cumsum(weights)
    total = cdf[-1]
    if not total > 0.0:
        raise DegenerateStratumError("cannot draw from a zero-mass stratum")
    pos = np.searchsorted(cdf, rng.random(k) * total, side="right")
    return members[np.minimum(pos, members.size - 1)]


def draw_subsample(plan: SubsamplingPlan, r: int, rng) -> Subsample:
    """Draw ``r`` indices with replacement under the plan.

    Stratified plans draw ``round(r * event_mass)`` indices from the event
    stratum and the remainder from the censored stratum (events first in the
    returned order), so the subsample censoring rate matches the full data.
    """
    if r < 1:
        raise ValueError("subsample size r must be >= 1")
    n = plan.probs.size
    all_idx = np.arange(n, dtype=np.intp)
    if plan.stratified:
        r1 = _round_half_up(r * plan.event_mass)
        r0 = r - r1
        idx1 = _draw_categorical(plan.probs, all_idx[plan.event_mask], r1, rng)
        idx0 = _draw_categorical(plan.probs, all_idx[~plan.event_mask], r0, rng)
        indices = np.concatenate([idx1, idx0])
    else:
        indices = _draw_categorical(plan.probs, all_idx, r, rng)
    return Subsample(
        indices=indices,
        probs_at_draw=plan.probs[indices],
        r=r,
        source_n=n,
    )


def pilot_stage(cohort: SortedCohort, r: int, rng):
    """Stage-one pilot: stratified uniform draw, unit-information weights.

    Draws ``round(r * event_rate)`` indices uniformly from the event stratum
    and the rest uniformly from the censored stratum, then fits with equal
    ``1/n`` probabilities from ``beta = 0``.  With equal probabilities the
    weighted score is a positive multiple of the plain partial-likelihood
    score on the drawn rows, so the plain solver gives the identical root.
    Fit failures trigger a redraw, up to five attempts.
    """
    p = cohort.p
    if r < 2 * (p + 1):
        raise ValueError(f"pilot size r={r} below the minimum 2(p+1)={2 * (p + 1)}")
    s0, s1 = cohort.s0_index, cohort.s1_index
    if s1.size == 0:
        raise EstimationError("no events in cohort; pilot impossible")
    delta_bar = 1.0 - cohort.censoring_rate
    r1 = _round_half_up(r * delta_bar)
    r0 = r - r1
    if r0 > 0 and s0.size == 0:
        raise EstimationError("censored stratum empty but censored draws requested")

    last_error = None
    for _ in range(5):
        idx1 = s1[rng.integers(0, s1.size, size=r1)] if r1 else np.empty(0, dtype=np.intp)
        idx0 = s0[rng.integers(0, s0.size, size=r0)] if r0 else np.empty(0, dtype=np.intp)
        indices = np.concatenate([idx1, idx0]).astype(np.intp)
        sub = Subsample(
            indices=indices,
            probs_at_draw=np.full(r, 1.0 / cohort.n),
            r=r,
            source_n=cohort.n,
        )
        try:
            fit = newton_solve(sort_cohort(cohort.base.take(indices)))
        except EstimationError as exc:
            last_error = exc
            continue
        return fit.beta, sub
    raise PilotError(f"pilot failed after 5 attempts: {last_error}")
