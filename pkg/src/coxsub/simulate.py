"""Monte Carlo study harness: scenario generators, censoring calibration,
replicate execution, and Bias/SSE/ESE/CP/MSE aggregation.

Replicates are reproducible under any worker count: replicate ``i`` derives
its random streams from ``SeedSequence(master_seed, spawn_key=(i,))`` and the
aggregation is ordered by replicate index.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cox import newton_solve
from .data import Cohort, sort_cohort
from .errors import CalibrationError, CoxSubError
from .sampling import SamplingMethod
from .weighted import normal_quantile, run_algorithm1

__all__ = [
    "Baseline",
    "BETA0",
    "CASES",
    "ScenarioConfig",
    "ScenarioResult",
    "MetricsTable",
    "gen_covariates",
    "gen_event_times",
    "make_cohort",
    "calibrate_censoring",
    "run_scenario",
    "compute_metrics",
    "repeated_subsampling",
    "resolve_workers",
]

# true coefficients of the synthetic scenarios (six covariates)
BETA0 = np.array([0.5, 1.0, -0.3, -0.7, 0.4, 0.6])
BETA0.flags.writeable = False

# AR(1)-style covariance of the three joint-normal covariates
_SIGMA0 = 0.5 ** np.abs(np.subtract.outer(np.arange(3), np.arange(3)))
_CHOL0 = np.linalg.cholesky(_SIGMA0)

_CALIBRATION_SEED = 20240101


class Baseline(str, Enum):
    """Baseline hazard shape of the synthetic scenarios."""

    CONSTANT = "constant"  # hazard 0.5, cumulative 0.5 t
    LINEAR = "linear"      # hazard t, cumulative t^2 / 2

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=float)
        return 0.5 * t if self is Baseline.CONSTANT else 0.5 * t * t


# case number -> (baseline, target censoring rate)
CASES = {
    1: (Baseline.CONSTANT, 0.30),
    2: (Baseline.CONSTANT, 0.50),
    3: (Baseline.LINEAR, 0.30),
    4: (Baseline.LINEAR, 0.50),
}

DEFAULT_METHODS = (SamplingMethod.UNIFORM, SamplingMethod.FULL_OPT, SamplingMethod.CEN_OPT)
DEFAULT_R_GRID = (100, 200, 300, 400, 500)


def gen_covariates(n: int, rng) -> np.ndarray:
    """Six scenario covariates: three correlated normals (lag-decay 0.5
    covariance via its lower-triangular factor), one Gamma(2,1) drawn as the
    sum of two unit exponentials, Bernoulli(0.5), Bernoulli(0.3)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = np.empty((n, 6))
    z[:, :3] = rng.standard_normal((n, 3)) @ _CHOL0.T
    z[:, 3] = rng.standard_exponential((n, 2)).sum(axis=1)
    z[:, 4] = rng.random(n) < 0.5
    z[:, 5] = rng.random(n) < 0.3
    return z


def gen_event_times(z: np.ndarray, beta0, baseline: Baseline, rng) -> np.ndarray:
    """Event times by inverting the cumulative hazard at a unit exponential.

    Constant baseline: ``T = 2 E exp(-beta0.Z)``; linear baseline:
    ``T = sqrt(2 E exp(-beta0.Z))`` with ``E ~ Exp(1)``.
    """
    beta0 = np.asarray(beta0, dtype=float)
    core = 2.0 * rng.standard_exponential(z.shape[0]) * np.exp(-(z @ beta0))
    return core if baseline is Baseline.CONSTANT else np.sqrt(core)


def make_cohort(n: int, beta0, baseline: Baseline, c: float, rng) -> Cohort:
    """One synthetic cohort with censoring times uniform on (0, c).

    Draw order is fixed (covariates, event exponentials, censoring uniforms)
    so a given stream always produces the same cohort.
    """
    z = gen_covariates(n, rng)
    t = gen_event_times(z, beta0, baseline, rng)
    censor = c * rng.random(n)
    status = (t <= censor).astype(np.int8)
    return Cohort(z, np.minimum(t, censor), status)


def calibrate_censoring(beta0, baseline: Baseline, target: float,
                        n_draws: int = 1_000_000, tol: float = 0.002,
                        seed: int = _CALIBRATION_SEED):
    """Find ``c`` so that censoring times ``U(0, c)`` hit the target rate.

    Log-space bisection over ``c in [1e-6, 1e6]`` against a Monte Carlo
    estimate of the censoring probability; every evaluation uses a fresh
    substream of the fixed calibration seed, so the result is reproducible.
    Returns ``(c, achieved_rate)``.
    """
    if not 0.0 < target < 1.0:
        raise ValueError("target censoring rate must lie strictly in (0, 1)")
    beta0 = np.asarray(beta0, dtype=float)
    counter = [0]

    def rate(c: float) -> float:
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(counter[0],))
        counter[0] += 1
        rng = np.random.Generator(np.random.PCG64(ss))
        z = gen_covariates(n_draws, rng)
        t = gen_event_times(z, beta0, baseline, rng)
        return float(np.mean(t > c * rng.random(n_draws)))

    lo, hi = 1e-6, 1e6
    if not (rate(lo) > target > rate(hi)):
        raise CalibrationError(
            f"target rate {target} not bracketed by c in [{lo}, {hi}]"
        )
    for _ in range(200):
        mid = math.exp(0.5 * (math.log(lo) + math.log(hi)))
        est = rate(mid)
        if abs(est - target) <= tol:
            return mid, est
        if est > target:  # too much censoring: need larger c
            lo = mid
        else:
            hi = mid
    raise CalibrationError("censoring calibration did not converge")


_calibration_cache: dict = {}


def _calibrate_cached(beta0, baseline: Baseline, target: float):
    key = (tuple(np.asarray(beta0, dtype=float)), baseline, target)
    if key not in _calibration_cache:
        _calibration_cache[key] = calibrate_censoring(beta0, baseline, target)
    return _calibration_cache[key]


@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte Carlo scenario.

    ``case`` is a label for reports ("1".."4" for the canonical scenarios,
    anything else for custom parameter sets).
    """

    baseline: Baseline
    target_censoring: float
    case: str = "custom"
    n: int = 20_000
    beta0: tuple = tuple(BETA0)
    r_grid: tuple = DEFAULT_R_GRID
    b: int = 1000
    methods: tuple = DEFAULT_METHODS
    master_seed: int = 1
    level: float = 0.95
    with_full_fit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "baseline", Baseline(self.baseline))
        object.__setattr__(self, "beta0", tuple(float(v) for v in self.beta0))
        object.__setattr__(self, "r_grid", tuple(int(r) for r in self.r_grid))
        object.__setattr__(
            self, "methods", tuple(SamplingMethod(m) for m in self.methods)
        )
        if len(self.beta0) != 6:
            raise ValueError("scenario coefficients must have six coordinates")
        if not 0.0 < self.target_censoring < 1.0:
            raise ValueError("target_censoring must lie strictly in (0, 1)")
        if self.b < 1:
            raise ValueError("replicate count b must be >= 1")
        if not self.r_grid:
            raise ValueError("r_grid must be nonempty")
        if self.n < 10 * max(self.r_grid):
            raise ValueError("cohort size n must be at least 10 * max(r_grid)")

    @classmethod
    def from_case(cls, case: int, **overrides) -> "ScenarioConfig":
        if case not in CASES:
            raise ValueError(f"unknown case {case}; expected one of {sorted(CASES)}")
        baseline, target = CASES[case]
        return cls(baseline=baseline, target_censoring=target, case=str(case), **overrides)


@dataclass(frozen=True)
class CoordinateRow:
    method: str
    r: int
    coord: int
    bias: float
    sse: float
    ese: float
    cp: float


@dataclass(frozen=True)
class SummaryRow:
    method: str
    r: int
    mse: float
    mse_mcse: float
    n_used: int
    n_failed: int
    relative_efficiency: float | None = None


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


@dataclass
class MetricsTable:
    """Per-coordinate and per-(method, r) aggregates of one scenario."""

    case: str
    coordinate_rows: list = field(default_factory=list)
    summary_rows: list = field(default_factory=list)

    def coord(self, method, r: int):
        """Arrays (bias, sse, ese, cp), one entry per coordinate."""
        method = SamplingMethod(method).value
        rows = sorted(
            (row for row in self.coordinate_rows if row.method == method and row.r == r),
            key=lambda row: row.coord,
        )
        if not rows:
            raise KeyError((method, r))
        stack = np.array([[row.bias, row.sse, row.ese, row.cp] for row in rows])
        return stack[:, 0], stack[:, 1], stack[:, 2], stack[:, 3]

    def summary(self, method, r: int) -> SummaryRow:
        method = SamplingMethod(method).value
        for row in self.summary_rows:
            if row.method == method and row.r == r:
                return row
        raise KeyError((method, r))

    def mse(self, method, r: int) -> float:
        return self.summary(method, r).mse

    def relative_efficiency(self, r: int) -> float | None:
        for row in self.summary_rows:
            if row.r == r and row.relative_efficiency is not None:
                return row.relative_efficiency
        return None

    def write_coordinate_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("case,method,r,coord,bias,sse,ese,cp\n")
            for row in self.coordinate_rows:
                fh.write(
                    f"{self.case},{row.method},{row.r},{row.coord},"
                    f"{_fmt(row.bias)},{_fmt(row.sse)},{_fmt(row.ese)},{_fmt(row.cp)}\n"
                )

    def write_summary_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("case,method,r,mse,mse_mcse,n_used,n_failed,relative_efficiency\n")
            for row in self.summary_rows:
                fh.write(
                    f"{self.case},{row.method},{row.r},{_fmt(row.mse)},{_fmt(row.mse_mcse)},"
                    f"{row.n_used},{row.n_failed},{_fmt(row.relative_efficiency)}\n"
                )


def compute_metrics(betas: dict, ses: dict, beta0, level: float = 0.95,
                    case: str = "custom", method_order=None) -> MetricsTable:
    """Aggregate per-replicate estimates into a MetricsTable.

    ``betas[(method, r)]`` is a ``(B, p)`` array with NaN rows marking failed
    replicates; ``ses`` matches.  Bias is the mean deviation from ``beta0``,
    SSE the (B-1)-denominator sample SD (missing when fewer than two usable
    replicates), ESE the mean reported standard error, CP the coverage of the
    normal intervals at ``level``, and MSE the mean squared deviation norm.
    """
    beta0 = np.asarray(beta0, dtype=float)
    z = normal_quantile(0.5 * (1.0 + level))
    table = MetricsTable(case=case)
    keys = list(betas)
    if method_order is not None:
        order = {SamplingMethod(m).value: i for i, m in enumerate(method_order)}
        keys.sort(key=lambda key: (order.get(SamplingMethod(key[0]).value, 99), key[1]))
    else:
        keys.sort(key=lambda key: (SamplingMethod(key[0]).value, key[1]))

    mse_by_key = {}
    for method, r in keys:
        method_value = SamplingMethod(method).value
        all_beta = np.asarray(betas[(method, r)], dtype=float)
        all_se = np.asarray(ses[(method, r)], dtype=float)
        ok = ~np.isnan(all_beta).any(axis=1)
        used = int(ok.sum())
        failed = int(ok.size - used)
        beta_ok = all_beta[ok]
        se_ok = all_se[ok]
        if used == 0:
            warnings.warn(f"{method_value} r={r}: no usable replicates", RuntimeWarning)
            continue
        dev = beta_ok - beta0
        bias = dev.mean(axis=0)
        sse = beta_ok.std(axis=0, ddof=1) if used > 1 else np.full(beta0.size, np.nan)
        ese = se_ok.mean(axis=0)
        cover = np.abs(dev) <= z * se_ok
        cp = cover.mean(axis=0)
        sq = (dev * dev).sum(axis=1)
        mse = float(sq.mean())
        mse_mcse = float(sq.std(ddof=1) / math.sqrt(used)) if used > 1 else float("nan")
        for j in range(beta0.size):
            table.coordinate_rows.append(
                CoordinateRow(method_value, r, j + 1,
                              float(bias[j]), float(sse[j]), float(ese[j]), float(cp[j]))
            )
        table.summary_rows.append(
            SummaryRow(method_value, r, mse, mse_mcse, used, failed)
        )
        mse_by_key[(method_value, r)] = mse

    # relative efficiency MSE(Uniform) / MSE(FullOpt), attached to FullOpt rows
    for i, row in enumerate(table.summary_rows):
        if row.method != SamplingMethod.FULL_OPT.value:
            continue
        uniform = mse_by_key.get((SamplingMethod.UNIFORM.value, row.r))
        if uniform is not None and row.mse > 0:
            table.summary_rows[i] = SummaryRow(
                row.method, row.r, row.mse, row.mse_mcse, row.n_used, row.n_failed,
                relative_efficiency=uniform / row.mse,
            )
    return table


def resolve_workers(requested=None) -> int:
    """Worker count: explicit request, else COXSUB_THREADS, else CPU count."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("COXSUB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _one_replicate(config: ScenarioConfig, c: float, index: int) -> dict:
    n_cells = len(config.methods) * len(config.r_grid)
    streams = np.random.SeedSequence(
        entropy=config.master_seed, spawn_key=(index,)
    ).spawn(1 + n_cells)
    rng = np.random.Generator(np.random.PCG64(streams[0]))
    cohort = make_cohort(config.n, np.asarray(config.beta0), config.baseline, c, rng)
    sorted_cohort = sort_cohort(cohort)

    out = {"index": index, "beta_full": None, "cells": {}}
    if config.with_full_fit:
        try:
            out["beta_full"] = newton_solve(sorted_cohort).beta
        except CoxSubError:
            out["beta_full"] = None
    stream = 1
    for method in config.methods:
        for r in config.r_grid:
            cell_rng = np.random.Generator(np.random.PCG64(streams[stream]))
            stream += 1
            try:
                fit, _ = run_algorithm1(sorted_cohort, r, method, cell_rng,
                                        level=config.level)
                out["cells"][(method.value, r)] = (fit.beta, fit.se())
            except CoxSubError:
                out["cells"][(method.value, r)] = None
    return out


def _capture_warnings(fn):
    """Run ``fn()`` recording warnings; they cross process boundaries as text."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        value = fn()
    return value, [(type(w.message).__name__, str(w.message)) for w in caught]


def _replicate_chunk(args):
    config, c, indices = args
    records, notes = _capture_warnings(
        lambda: [_one_replicate(config, c, i) for i in indices]
    )
    return {"records": records, "warnings": notes}


def _run_chunks(worker, payloads, workers: int):
    if workers <= 1 or len(payloads) <= 1:
        results = [worker(payload) for payload in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(worker, payloads))
    merged = []
    seen = set()
    for chunk in results:
        merged.extend(chunk["records"])
        for name, message in chunk["warnings"]:
            if (name, message) in seen:
                continue
            seen.add((name, message))
            category = {"RuntimeWarning": RuntimeWarning, "UserWarning": UserWarning}.get(
                name, RuntimeWarning
            )
            warnings.warn(message, category, stacklevel=3)
    return merged


def _chunk_indices(total: int, workers: int):
    chunk = max(1, math.ceil(total / max(1, workers * 4)))
    return [list(range(start, min(start + chunk, total))) for start in range(0, total, chunk)]


@dataclass
class ScenarioResult:
    """Scenario output: metrics plus the raw per-replicate estimates."""

    config: ScenarioConfig
    metrics: MetricsTable
    calibrated_c: float
    achieved_rate: float
    failures: dict
    betas: dict
    ses: dict
    full_betas: np.ndarray | None = None

    def failure_summary(self) -> list:
        return [
            {"method": method, "r": r, "failures": count}
            for (method, r), count in sorted(self.failures.items())
        ]


def run_scenario(config: ScenarioConfig, workers=None) -> ScenarioResult:
    """Run all replicates of a scenario and aggregate the metrics.

    Each replicate draws a fresh cohort, then runs the two-stage subsampling
    estimator for every (method, r) combination on it.  Failed cells are
    excluded from aggregation and counted; a scenario-level warning fires when
    any cell loses more than 2% of its replicates.
    """
    workers = resolve_workers(workers)
    c, achieved = _calibrate_cached(np.asarray(config.beta0), config.baseline,
                                    config.target_censoring)
    payloads = [(config, c, idx) for idx in _chunk_indices(config.b, workers)]
    records = _run_chunks(_replicate_chunk, payloads, workers)
    records.sort(key=lambda rec: rec["index"])

    p = len(config.beta0)
    keys = [(m.value, r) for m in config.methods for r in config.r_grid]
    betas = {key: np.full((config.b, p), np.nan) for key in keys}
    ses = {key: np.full((config.b, p), np.nan) for key in keys}
    failures = {key: 0 for key in keys}
    full_betas = np.full((config.b, p), np.nan) if config.with_full_fit else None
    for rec in records:
        i = rec["index"]
        if full_betas is not None and rec["beta_full"] is not None:
            full_betas[i] = rec["beta_full"]
        for key, cell in rec["cells"].items():
            if cell is None:
                failures[key] += 1
            else:
                betas[key][i], ses[key][i] = cell

    for (method, r), count in failures.items():
        if count > 0.02 * config.b:
            warnings.warn(
                f"scenario {config.case}: {method} r={r} lost {count}/{config.b} replicates",
                RuntimeWarning,
            )
    metrics = compute_metrics(betas, ses, np.asarray(config.beta0),
                              level=config.level, case=config.case,
                              method_order=config.methods)
    return ScenarioResult(
        config=config,
        metrics=metrics,
        calibrated_c=c,
        achieved_rate=achieved,
        failures=failures,
        betas=betas,
        ses=ses,
        full_betas=full_betas,
    )


def _analysis_chunk(args):
    cohort_arrays, methods, r, level, master_seed, indices = args
    cohort = Cohort(*cohort_arrays)
    sorted_cohort = sort_cohort(cohort)

    def work():
        out = []
        for i in indices:
            streams = np.random.SeedSequence(entropy=master_seed, spawn_key=(i,)).spawn(
                len(methods)
            )
            cells = {}
            for j, method in enumerate(methods):
                rng = np.random.Generator(np.random.PCG64(streams[j]))
                try:
                    fit, _ = run_algorithm1(sorted_cohort, r, method, rng, level=level)
                    cells[method.value] = (fit.beta, fit.se())
                except CoxSubError:
                    cells[method.value] = None
            out.append({"index": i, "cells": cells})
        return out

    records, notes = _capture_warnings(work)
    return {"records": records, "warnings": notes}


def repeated_subsampling(cohort: Cohort, methods, r: int, b: int, master_seed: int,
                         level: float = 0.95, workers=None):
    """Repeat the two-stage estimator ``b`` times on one fixed dataset.

    Returns ``(betas, ses, failures)`` where ``betas[method]`` is ``(b, p)``
    with NaN rows for failed replicates.  Replicate ``i`` uses substream
    ``(master_seed, (i,))`` regardless of worker count.
    """
    workers = resolve_workers(workers)
    methods = tuple(SamplingMethod(m) for m in methods)
    arrays = (cohort.covariates, cohort.time, cohort.status, cohort.feature_names)
    payloads = [
        (arrays, methods, r, level, master_seed, idx)
        for idx in _chunk_indices(b, workers)
    ]
    records = _run_chunks(_analysis_chunk, payloads, workers)
    records.sort(key=lambda rec: rec["index"])

    betas = {m.value: np.full((b, cohort.p), np.nan) for m in methods}
    ses = {m.value: np.full((b, cohort.p), np.nan) for m in methods}
    failures = {m.value: 0 for m in methods}
    for rec in records:
        i = rec["index"]
        for method_value, cell in rec["cells"].items():
            if cell is None:
                failures[method_value] += 1
            else:
                betas[method_value][i], ses[method_value][i] = cell
    return betas, ses, failures
