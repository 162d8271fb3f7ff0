"""Hourly count ingestion and calendar structure.

Raw dispatch records (one row per call) are collapsed to one arrival per
event and binned into a days-by-hours count matrix.  Days with recording
gaps or special holidays are removed whole, and the remaining record is
segmented into contiguous blocks of consecutive calendar days; downstream
likelihoods and queue simulations restart their state at each block head.

Conventions used throughout the package:

* hours are indexed 1..24, hour j covering clock time [j-1, j);
* weekdays are Monday=1 .. Sunday=7;
* week-of-year is ceil(day_of_year / 7), capped at 53.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Iterator, Sequence

import numpy as np

HOURS_PER_DAY = 24

WEEKDAY_NAMES = ("Monday", "Tuesday", "Wednesday", "Thursday",
                 "Friday", "Saturday", "Sunday")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class CallRecord:
    """A single logged call: opaque event id plus minute-resolution time."""

    event_id: str
    timestamp: datetime

    def __post_init__(self):
        if not self.event_id:
            raise DataError("event_id must be nonempty")


@dataclass(frozen=True)
class HourlyCountSeries:
    """Counts per (retained day, hour) plus the list of removed days.

    ``counts`` has one row per retained day, columns are hours 1..24.
    ``excluded_days`` records dates dropped from the analysis; they never
    appear in ``day_dates``.  The linear hour index t = i*24 + j (0-based
    day i, 0-based hour j) runs over retained days only.
    """

    counts: np.ndarray
    day_dates: tuple[date, ...]
    excluded_days: frozenset[date] = field(default_factory=frozenset)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", c)
        if c.ndim != 2 or c.shape[1] != HOURS_PER_DAY:
            raise DataError(f"counts must be (days, {HOURS_PER_DAY})")
        if c.shape[0] != len(self.day_dates):
            raise DataError("counts rows and day_dates length differ")
        if np.any(c < 0):
            raise DataError("counts must be nonnegative")
        if len(set(self.day_dates)) != len(self.day_dates):
            raise DataError("duplicate dates in day_dates")
        if any(a >= b for a, b in zip(self.day_dates, self.day_dates[1:])):
            raise DataError("day_dates must be strictly increasing")
        if self.excluded_days & set(self.day_dates):
            raise DataError("excluded_days overlap retained day_dates")
        object.__setattr__(self, "excluded_days", frozenset(self.excluded_days))

    @property
    def n_days(self) -> int:
        return self.counts.shape[0]

    @property
    def n_hours(self) -> int:
        return self.counts.size

    def flat_counts(self) -> np.ndarray:
        """Counts as a 1-D array in linear hour order."""
        return self.counts.reshape(-1)

    def hour_of_day(self) -> np.ndarray:
        """Hour index 1..24 for every linear hour position."""
        return np.tile(np.arange(1, HOURS_PER_DAY + 1), self.n_days)

    def linear_index(self, day: int, hour: int) -> int:
        """Linear position of (0-based day, 1-based hour)."""
        if not 0 <= day < self.n_days:
            raise IndexError("day out of range")
        if not 1 <= hour <= HOURS_PER_DAY:
            raise IndexError("hour out of range")
        return day * HOURS_PER_DAY + (hour - 1)

    def day_hour(self, t: int) -> tuple[int, int]:
        """Inverse of linear_index: (0-based day, 1-based hour)."""
        if not 0 <= t < self.n_hours:
            raise IndexError("linear index out of range")
        return t // HOURS_PER_DAY, t % HOURS_PER_DAY + 1

    def date_index(self) -> dict[date, int]:
        return {d: i for i, d in enumerate(self.day_dates)}

    def without_days(self, days: Iterable[date]) -> "HourlyCountSeries":
        """Drop the given dates, adding them to excluded_days."""
        drop = set(days)
        keep = [i for i, d in enumerate(self.day_dates) if d not in drop]
        return HourlyCountSeries(
            counts=self.counts[keep],
            day_dates=tuple(d for d in self.day_dates if d not in drop),
            excluded_days=self.excluded_days | (drop & set(self.day_dates)),
        )

    def restrict(self, start: date, end: date) -> "HourlyCountSeries":
        """Sub-series of days in [start, end]; excluded days filtered alike."""
        keep = [i for i, d in enumerate(self.day_dates) if start <= d <= end]
        return HourlyCountSeries(
            counts=self.counts[keep],
            day_dates=tuple(d for d in self.day_dates if start <= d <= end),
            excluded_days=frozenset(d for d in self.excluded_days
                                    if start <= d <= end),
        )


@dataclass(frozen=True)
class CalendarDesign:
    """Day-of-week and week-of-year incidence matrices for a series.

    H1 (days x 7) marks the weekday of each retained day, H2 (days x 53)
    its week-of-year; H = [H1 H2].  Note the two blocks share the constant
    vector (each row of each block sums to one), so H as a whole carries
    one intrinsic rank deficiency; estimation resolves it with a
    sum-to-zero convention on the week effects.
    """

    H1: np.ndarray
    H2: np.ndarray
    dow: np.ndarray  # 1..7 per day
    woy: np.ndarray  # 1..53 per day

    @property
    def H(self) -> np.ndarray:
        return np.hstack([self.H1, self.H2])

    @property
    def n_days(self) -> int:
        return self.H1.shape[0]


@dataclass(frozen=True)
class BlockSegmentation:
    """Half-open linear-hour ranges covering runs of consecutive days."""

    ranges: tuple[tuple[int, int], ...]

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(self.ranges)

    def __len__(self) -> int:
        return len(self.ranges)

    def starts(self) -> np.ndarray:
        return np.array([r[0] for r in self.ranges], dtype=np.int64)

    def stops(self) -> np.ndarray:
        return np.array([r[1] for r in self.ranges], dtype=np.int64)


def week_of_year(d: date) -> int:
    """ceil(day_of_year / 7), capped at 53."""
    doy = d.timetuple().tm_yday
    return min((doy + 6) // 7, 53)


def day_of_week(d: date) -> int:
    """Monday=1 .. Sunday=7."""
    return d.isoweekday()


def read_calls_csv(path) -> Iterator[CallRecord]:
    """Parse a call CSV with header ``event_id,timestamp`` (ISO-8601)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["event_id", "timestamp"]:
            raise DataError(f"{path}: expected header 'event_id,timestamp'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[1].strip())
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad timestamp {row[1]!r}: {exc}") from None
            yield CallRecord(event_id=row[0].strip(), timestamp=ts)


def ingest_calls(records: Iterable[CallRecord],
                 window: tuple[date, date],
                 holidays: Sequence[date] = ()) -> HourlyCountSeries:
    """Bin call records into hourly counts over a study window.

    Multiple records sharing an event_id collapse to the earliest
    timestamp (only the first call for an event is an arrival).  Records
    whose first timestamp falls outside the window are dropped.  Holiday
    dates inside the window are removed whole and reported in
    ``excluded_days``.
    """
    start, end = window
    if end < start:
        raise DataError("empty study window")

    first_seen: dict[str, datetime] = {}
    for rec in records:
        prev = first_seen.get(rec.event_id)
        if prev is None or rec.timestamp < prev:
            first_seen[rec.event_id] = rec.timestamp

    n_days = (end - start).days + 1
    all_dates = [start + timedelta(days=i) for i in range(n_days)]
    row_of = {d: i for i, d in enumerate(all_dates)}
    counts = np.zeros((n_days, HOURS_PER_DAY), dtype=np.int64)
    for ts in first_seen.values():
        i = row_of.get(ts.date())
        if i is None:
            continue
        counts[i, ts.hour] += 1

    holiday_set = {d for d in holidays if start <= d <= end}
    series = HourlyCountSeries(counts=counts, day_dates=tuple(all_dates))
    return series.without_days(holiday_set)


def detect_gap_days(series: HourlyCountSeries) -> set[date]:
    """Days containing at least two consecutive zero-count hours.

    The scan is within-day only (hours 1..24); whole days are removed, so
    a quiet stretch across midnight flags a day only if that day itself
    contains a two-hour zero run.
    """
    c = series.counts
    pair_zero = (c[:, :-1] + c[:, 1:]) == 0
    flagged = np.flatnonzero(pair_zero.any(axis=1))
    return {series.day_dates[i] for i in flagged}


def build_design(series: HourlyCountSeries) -> CalendarDesign:
    """Incidence matrices for day-of-week and week-of-year.

    Raises if some weekday never occurs among the retained days (its H1
    column would be identically zero and the loading for it inestimable).
    Week columns are allowed to be empty: the cyclic week basis used in
    estimation interpolates unobserved weeks.
    """
    if series.n_days == 0:
        raise DataError("cannot build a design for an empty series")
    dow = np.array([day_of_week(d) for d in series.day_dates], dtype=np.int64)
    woy = np.array([week_of_year(d) for d in series.day_dates], dtype=np.int64)
    H1 = np.zeros((series.n_days, 7))
    H1[np.arange(series.n_days), dow - 1] = 1.0
    H2 = np.zeros((series.n_days, 53))
    H2[np.arange(series.n_days), woy - 1] = 1.0
    missing = np.flatnonzero(H1.sum(axis=0) == 0)
    if missing.size:
        names = ", ".join(WEEKDAY_NAMES[i] for i in missing)
        raise DataError(f"design is rank deficient: no observed day for {names}")
    return CalendarDesign(H1=H1, H2=H2, dow=dow, woy=woy)


def segment_blocks(series: HourlyCountSeries) -> BlockSegmentation:
    """Maximal runs of calendar-consecutive retained days, as hour ranges."""
    if series.n_days == 0:
        return BlockSegmentation(ranges=())
    ranges = []
    run_start = 0
    for i in range(1, series.n_days):
        if (series.day_dates[i] - series.day_dates[i - 1]).days != 1:
            ranges.append((run_start * HOURS_PER_DAY, i * HOURS_PER_DAY))
            run_start = i
    ranges.append((run_start * HOURS_PER_DAY, series.n_days * HOURS_PER_DAY))
    return BlockSegmentation(ranges=tuple(ranges))


def align_forecast_calendar(train_design: CalendarDesign,
                            test_series: HourlyCountSeries) -> np.ndarray:
    """Per-test-day (day-of-week, week-of-year) covariates.

    Aligns forecasts by calendar week of the year rather than day of the
    year, so a Sunday in week 10 of the test year is predicted from the
    model's Sunday/week-10 effects.  The week rule yields indices 1..53,
    all of which the training cyclic basis covers, so every test day is
    mappable; an out-of-range index signals inconsistent calendars.
    """
    del train_design  # both calendars are built by the same rules
    out = np.empty((test_series.n_days, 2), dtype=np.int64)
    for i, d in enumerate(test_series.day_dates):
        w = week_of_year(d)
        if not 1 <= w <= 53:
            raise DataError(f"week index {w} for {d} outside the 1..53 basis")
        out[i, 0] = day_of_week(d)
        out[i, 1] = w
    return out


def write_counts_csv(series: HourlyCountSeries, path) -> None:
    """Write ``date,hour,count`` rows, hours 1..24."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "hour", "count"])
        for i, d in enumerate(series.day_dates):
            for j in range(HOURS_PER_DAY):
                writer.writerow([d.isoformat(), j + 1, int(series.counts[i, j])])


def write_excluded_sidecar(series: HourlyCountSeries, path) -> None:
    """One excluded date per line."""
    with open(path, "w") as fh:
        for d in sorted(series.excluded_days):
            fh.write(d.isoformat() + "\n")


def read_counts_csv(path, excluded_path=None) -> HourlyCountSeries:
    """Read a counts CSV written by :func:`write_counts_csv`."""
    rows: dict[date, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["date", "hour", "count"]:
            raise DataError(f"{path}: expected header 'date,hour,count'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                d = date.fromisoformat(row[0].strip())
                hour = int(row[1])
                count = int(row[2])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: bad row: {exc}") from None
            if not 1 <= hour <= HOURS_PER_DAY:
                raise DataError(f"{path}:{lineno}: hour {hour} outside 1..24")
            rows.setdefault(d, np.full(HOURS_PER_DAY, -1, dtype=np.int64))[hour - 1] = count
    dates = sorted(rows)
    counts = np.stack([rows[d] for d in dates]) if dates else np.zeros((0, HOURS_PER_DAY), dtype=np.int64)
    if dates and np.any(counts < 0):
        missing = [(dates[i], j + 1) for i, j in zip(*np.nonzero(counts < 0))]
        raise DataError(f"{path}: missing hours, first: {missing[0]}")
    excluded: set[date] = set()
    if excluded_path is not None:
        with open(excluded_path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    excluded.add(date.fromisoformat(line))
    return HourlyCountSeries(counts=counts, day_dates=tuple(dates),
                             excluded_days=frozenset(excluded))
