"""Survival data model: records, cohorts, CSV ingestion, sorted representation.

A cohort stores right-censored observations ``(Z_i, X_i, delta_i)`` as dense
arrays.  ``sort_cohort`` builds the time-sorted view with the event-time grid
and risk-set boundaries that the partial-likelihood passes consume.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "SurvivalRecord",
    "Cohort",
    "SortedCohort",
    "CsvSchema",
    "load_csv",
    "save_csv",
    "sort_cohort",
    "censoring_split",
]

_MISSING_TOKENS = {"", "na", "nan", "null"}


@dataclass(frozen=True)
class SurvivalRecord:
    """One observation: covariate vector, observed time, event indicator."""

    covariates: np.ndarray
    time: float
    status: int

    def __post_init__(self):
        z = np.asarray(self.covariates, dtype=float)
        object.__setattr__(self, "covariates", z)
        if z.ndim != 1 or not np.all(np.isfinite(z)):
            raise DataError("covariates must be a finite 1-d vector")
        if not (math.isfinite(self.time) and self.time >= 0):
            raise DataError(f"time must be finite and nonnegative, got {self.time}")
        if self.status not in (0, 1):
            raise DataError(f"status must be 0 or 1, got {self.status}")


class Cohort:
    """A set of survival records stored columnwise.

    Parameters
    ----------
    covariates : (n, p) array
        Covariate matrix, one row per subject.
    time : (n,) array
        Observed times ``X_i = min(T_i, C_i)``, nonnegative and finite.
    status : (n,) array
        Event indicators, 1 = event observed, 0 = censored.
    feature_names : sequence of str, optional
        Column labels (filled by ``load_csv``, used for report output).
    """

    def __init__(self, covariates, time, status, feature_names=None):
        z = np.ascontiguousarray(covariates, dtype=float)
        t = np.ascontiguousarray(time, dtype=float)
        d = np.ascontiguousarray(status)
        if z.ndim != 2:
            raise DataError("covariates must be a 2-d array")
        n, p = z.shape
        if n == 0:
            raise DataError("cohort must contain at least one record")
        if t.shape != (n,) or d.shape != (n,):
            raise DataError("time/status length must match the covariate rows")
        if not np.all(np.isfinite(z)):
            raise DataError("covariates must be finite")
        if not (np.all(np.isfinite(t)) and np.all(t >= 0)):
            raise DataError("times must be finite and nonnegative")
        if not np.isin(d, (0, 1)).all():
            raise DataError("status values must be 0 or 1")
        d = d.astype(np.int8)
        for arr in (z, t, d):
            arr.flags.writeable = False
        self.covariates = z
        self.time = t
        self.status = d
        self.feature_names = tuple(feature_names) if feature_names is not None else None
        if self.feature_names is not None and len(self.feature_names) != p:
            raise DataError("feature_names length must equal the covariate dimension")

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def __len__(self) -> int:
        return self.n

    def record(self, i: int) -> SurvivalRecord:
        return SurvivalRecord(self.covariates[i], float(self.time[i]), int(self.status[i]))

    @classmethod
    def from_records(cls, records) -> "Cohort":
        records = list(records)
        if not records:
            raise DataError("cohort must contain at least one record")
        z = np.stack([r.covariates for r in records])
        t = np.array([r.time for r in records], dtype=float)
        d = np.array([r.status for r in records])
        return cls(z, t, d)

    def take(self, indices) -> "Cohort":
        """Cohort formed by the given rows (repeats allowed)."""
        idx = np.asarray(indices, dtype=np.intp)
        return Cohort(self.covariates[idx], self.time[idx], self.status[idx], self.feature_names)


@dataclass(frozen=True)
class SortedCohort:
    """Time-sorted cohort with the event-time grid and risk-set scaffolding.

    ``order`` sorts records by ascending time with events placed before
    censorings at tied timestamps, so a record censored at ``t`` stays in the
    risk set of an event at ``t``.  ``risk_boundary[k]`` is the first sorted
    position whose time is ``>= event_times[k]``; the suffix from that
    position is exactly the risk set of the k-th distinct event time.
    """

    base: Cohort
    order: np.ndarray
    event_times: np.ndarray
    event_counts: np.ndarray
    censoring_rate: float
    s0_index: np.ndarray
    s1_index: np.ndarray
    # sorted views and event bookkeeping, derived once at construction
    time_sorted: np.ndarray = field(repr=False, default=None)
    status_sorted: np.ndarray = field(repr=False, default=None)
    covariates_sorted: np.ndarray = field(repr=False, default=None)
    risk_boundary: np.ndarray = field(repr=False, default=None)
    event_rows: np.ndarray = field(repr=False, default=None)
    event_group: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def p(self) -> int:
        return self.base.p

    @property
    def n_events(self) -> int:
        return int(self.event_counts.sum()) if self.event_counts.size else 0


def sort_cohort(cohort: Cohort) -> SortedCohort:
    """Build the sorted representation of a cohort.

    The permutation is total: ascending time, events before censorings at the
    same time, original index last.  Identical inputs therefore always produce
    identical output, including all derived index arrays.
    """
    t, d = cohort.time, cohort.status
    order = np.lexsort((1 - d, t))
    time_sorted = t[order]
    status_sorted = d[order]
    covariates_sorted = cohort.covariates[order]

    event_mask = status_sorted == 1
    event_rows = np.flatnonzero(event_mask)
    event_times, first_pos, event_counts = np.unique(
        time_sorted[event_rows], return_index=True, return_counts=True
    )
    # risk set of t_k = all sorted rows with time >= t_k
    risk_boundary = np.searchsorted(time_sorted, event_times, side="left")
    event_group = np.searchsorted(event_times, time_sorted[event_rows], side="left")
    del first_pos

    delta_bar = float(event_rows.size) / cohort.n
    s1_index = np.flatnonzero(d == 1)
    s0_index = np.flatnonzero(d == 0)
    for arr in (order, event_times, event_counts, s0_index, s1_index,
                time_sorted, status_sorted, covariates_sorted,
                risk_boundary, event_rows, event_group):
        arr.flags.writeable = False

    return SortedCohort(
        base=cohort,
        order=order,
        event_times=event_times,
        event_counts=event_counts,
        censoring_rate=1.0 - delta_bar,
        s0_index=s0_index,
        s1_index=s1_index,
        time_sorted=time_sorted,
        status_sorted=status_sorted,
        covariates_sorted=covariates_sorted,
        risk_boundary=risk_boundary,
        event_rows=event_rows,
        event_group=event_group,
    )


def censoring_split(cohort: Cohort):
    """Index sets of censored (status 0) and uncensored (status 1) records."""
    return np.flatnonzero(cohort.status == 0), np.flatnonzero(cohort.status == 1)


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for CSV ingestion.

    ``covariates`` lists covariate columns in output order.  Columns named in
    ``categorical`` are expanded to 0/1 dummies, one per non-baseline level
    (levels sorted lexicographically, first level is the baseline).  Missing
    numeric cells are median-filled for columns named in ``median_fill``
    (``True`` enables it for every numeric covariate column); anywhere else a
    missing cell is an error.
    """

    time: str
    status: str
    covariates: tuple
    categorical: frozenset = frozenset()
    median_fill: object = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", frozenset(self.categorical))
        if not self.covariates:
            raise DataError("schema must name at least one covariate column")
        unknown = self.categorical - set(self.covariates)
        if unknown:
            raise DataError(f"categorical columns not in covariates: {sorted(unknown)}")

    def fills(self, column: str) -> bool:
        if self.median_fill is True:
            return column not in self.categorical
        if self.median_fill is False or self.median_fill is None:
            return False
        return column in self.median_fill


def _is_missing(token: str) -> bool:
    return token.strip().lower() in _MISSING_TOKENS


def load_csv(path, schema: CsvSchema) -> Cohort:
    """Read a comma-separated file (header row, UTF-8, '.' decimals) into a Cohort.

    Raises ``DataError`` naming the offending line for unparseable cells,
    nonbinary status values, and missing cells in columns without median fill.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    if not rows:
        raise DataError(f"{path}: no data rows")

    col_idx = {name: i for i, name in enumerate(header)}
    for name in (schema.time, schema.status, *schema.covariates):
        if name not in col_idx:
            raise DataError(f"{path}: column {name!r} not found in header")

    n = len(rows)
    time = np.empty(n)
    status = np.empty(n, dtype=np.int8)
    numeric_cols = [c for c in schema.covariates if c not in schema.categorical]
    numeric = {c: np.empty(n) for c in numeric_cols}
    missing = {c: np.zeros(n, dtype=bool) for c in numeric_cols}
    raw_cat = {c: [] for c in schema.categorical}

    def cell(row, lineno, name):
        i = col_idx[name]
        if i >= len(row):
            raise DataError(f"{path}: line {lineno}: missing field {name!r}")
        return row[i]

    for j, (lineno, row) in enumerate(rows):
        tok = cell(row, lineno, schema.time)
        try:
            time[j] = float(tok)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: unparseable time {tok!r}") from None
        tok = cell(row, lineno, schema.status)
        try:
            s = float(tok)
        except ValueError:
            raise DataError(f"{path}: line {lineno}: unparseable status {tok!r}") from None
        if s not in (0.0, 1.0):
            raise DataError(f"{path}: line {lineno}: status must be 0 or 1, got {tok!r}")
        status[j] = int(s)
        for name in numeric_cols:
            tok = cell(row, lineno, name)
            if _is_missing(tok):
                if not schema.fills(name):
                    raise DataError(
                        f"{path}: line {lineno}: missing value in {name!r} "
                        "(enable median fill to allow)"
                    )
                missing[name][j] = True
                numeric[name][j] = np.nan
            else:
                try:
                    numeric[name][j] = float(tok)
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}: unparseable value {tok!r} in {name!r}"
                    ) from None
        for name in schema.categorical:
            tok = cell(row, lineno, name).strip()
            if _is_missing(tok):
                raise DataError(f"{path}: line {lineno}: missing categorical value in {name!r}")
            raw_cat[name].append(tok)

    for name in numeric_cols:
        hole = missing[name]
        if hole.any():
            observed = numeric[name][~hole]
            if observed.size == 0:
                raise DataError(f"{path}: column {name!r} has no observed values to fill from")
            numeric[name][hole] = np.median(observed)

    columns, names = [], []
    for name in schema.covariates:
        if name in schema.categorical:
            levels = sorted(set(raw_cat[name]))
            values = np.array(raw_cat[name])
            for level in levels[1:]:  # first level is the baseline
                columns.append((values == level).astype(float))
                names.append(f"{name}={level}")
        else:
            columns.append(numeric[name])
            names.append(name)
    z = np.column_stack(columns)

    try:
        return Cohort(z, time, status, feature_names=names)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_csv(cohort: Cohort, path) -> None:
    """Write a cohort back to CSV with round-trip-exact float formatting."""
    names = cohort.feature_names or tuple(f"z{i + 1}" for i in range(cohort.p))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "status", *names])
        for i in range(cohort.n):
            writer.writerow(
                [repr(float(cohort.time[i])), int(cohort.status[i])]
                + [repr(float(v)) for v in cohort.covariates[i]]
            )
