"""Event-log data model and CSV ingestion.

A log is a set of cases; a case is a timestamp-ordered sequence of events;
an event carries an activity label, a UTC timestamp (millisecond
resolution) and declared extra attributes, each either categorical or
continuous. Missing values are explicit: the reserved label for
categoricals, ``None`` for continuous cells.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable

from .errors import DataError

# reserved labels; kept out of user vocabularies by construction
MISSING_LABEL = "⟨NaN⟩"
UNKNOWN_LABEL = "⟨UNK⟩"
EOS_LABEL = "⟨EOS⟩"

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"

Schema = tuple[tuple[str, str], ...]  # ordered (name, kind) declarations


@dataclass(frozen=True)
class ColumnMapping:
    """How CSV columns map onto the event model."""

    case_col: str
    activity_col: str
    timestamp_col: str
    timestamp_format: str
    categorical: tuple[str, ...] = ()
    continuous: tuple[str, ...] = ()

    def schema(self) -> Schema:
        return tuple([(c, CATEGORICAL) for c in self.categorical]
                     + [(c, CONTINUOUS) for c in self.continuous])


@dataclass(frozen=True)
class Event:
    activity: str
    timestamp_ms: int
    cats: tuple[tuple[str, str], ...] = ()          # label or MISSING_LABEL
    conts: tuple[tuple[str, float | None], ...] = ()  # None marks missing

    @property
    def ts_seconds(self) -> float:
        return self.timestamp_ms / 1000.0

    def utc(self) -> datetime:
        base = datetime.fromtimestamp(self.timestamp_ms // 1000, tz=timezone.utc)
        return base.replace(microsecond=(self.timestamp_ms % 1000) * 1000)


@dataclass(frozen=True)
class Case:
    case_id: str
    events: tuple[Event, ...]

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> tuple[str, ...]:
        return tuple(e.activity for e in self.events)

    @property
    def duration_s(self) -> float:
        return (self.events[-1].timestamp_ms - self.events[0].timestamp_ms) / 1000.0


@dataclass
class SourceNotes:
    """Parse-time facts validation needs (lost after sorting/merging)."""

    noncontiguous_ids: set[str] = field(default_factory=set)
    presort_violations: set[str] = field(default_factory=set)


@dataclass
class EventLog:
    cases: dict[str, Case]
    schema: Schema
    notes: SourceNotes = field(default_factory=SourceNotes, compare=False)

    def __iter__(self):
        return iter(self.cases.values())

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    @property
    def n_events(self) -> int:
        return sum(len(c) for c in self.cases.values())


@dataclass(frozen=True)
class DatasetStats:
    n_cases: int
    n_events: int
    n_variants: int
    n_activities: int
    mean_case_length: float
    sd_case_length: float
    mean_case_duration_s: float
    sd_case_duration_s: float
    time_unit: str = "seconds"


@dataclass
class ValidationReport:
    noncontiguous_case_ids: list[str] = field(default_factory=list)
    presort_violations: list[str] = field(default_factory=list)
    schema_violations: list[str] = field(default_factory=list)  # "case/attr" strings

    @property
    def clean(self) -> bool:
        return not (self.noncontiguous_case_ids or self.presort_violations
                    or self.schema_violations)


def parse_timestamp(text: str, fmt: str) -> int:
    """Parse to integer UTC milliseconds; naive inputs are taken as UTC."""
    dt = datetime.strptime(text, fmt)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp() * 1000))


def format_timestamp(timestamp_ms: int, fmt: str) -> str:
    base = datetime.fromtimestamp(timestamp_ms // 1000, tz=timezone.utc)
    return base.replace(microsecond=(timestamp_ms % 1000) * 1000).strftime(fmt)


def parse_csv(stream: IO[bytes] | IO[str], mapping: ColumnMapping) -> EventLog:
    """Parse a UTF-8, comma-separated, headered CSV into an EventLog.

    Rows are grouped by case id and each case is sorted by timestamp,
    ties keeping file order. Empty cells become missing markers.
    """
    if hasattr(stream, "read") and isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("CSV is empty (no header row)") from None

    col_index = {name: i for i, name in enumerate(header)}
    for required in (mapping.case_col, mapping.activity_col, mapping.timestamp_col):
        if required not in col_index:
            raise DataError(f"CSV header is missing required column {required!r}")
    for name, _ in mapping.schema():
        if name not in col_index:
            raise DataError(f"CSV header is missing declared attribute column {name!r}")

    ci_case = col_index[mapping.case_col]
    ci_act = col_index[mapping.activity_col]
    ci_ts = col_index[mapping.timestamp_col]
    schema = mapping.schema()

    rows_by_case: dict[str, list[tuple[int, int, Event]]] = {}
    last_case: str | None = None
    notes = SourceNotes()

    for row_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise DataError(
                f"row {row_no}: expected {len(header)} columns, found {len(row)}")
        case_id = row[ci_case]
        activity = row[ci_act]
        if not activity:
            raise DataError(f"row {row_no}: empty activity label")
        ts_text = row[ci_ts]
        try:
            ts = parse_timestamp(ts_text, mapping.timestamp_format)
        except ValueError:
            raise DataError(
                f"row {row_no}: cannot parse timestamp {ts_text!r} "
                f"with format {mapping.timestamp_format!r}") from None

        cats = []
        conts = []
        for name, kind in schema:
            cell = row[col_index[name]]
            if kind == CATEGORICAL:
                cats.append((name, cell if cell != "" else MISSING_LABEL))
            else:
                if cell == "":
                    conts.append((name, None))
                else:
                    try:
                        conts.append((name, float(cell)))
                    except ValueError:
                        raise DataError(
                            f"row {row_no}: column {name!r} is declared continuous "
                            f"but cell {cell!r} is not a number") from None

        bucket = rows_by_case.setdefault(case_id, [])
        if bucket and last_case != case_id:
            notes.noncontiguous_ids.add(case_id)
        bucket.append((ts, row_no, Event(activity, ts, tuple(cats), tuple(conts))))
        last_case = case_id

    cases: dict[str, Case] = {}
    for case_id, rows in rows_by_case.items():
        raw_ts = [r[0] for r in rows]
        if any(b < a for a, b in zip(raw_ts, raw_ts[1:])):
            notes.presort_violations.add(case_id)
        rows.sort(key=lambda r: (r[0], r[1]))  # stable on file order for ties
        cases[case_id] = Case(case_id, tuple(r[2] for r in rows))
    return EventLog(cases=cases, schema=schema, notes=notes)


def write_csv(log: EventLog, mapping: ColumnMapping, stream: IO[str]) -> None:
    """Serialize back to the CSV layout described by ``mapping``."""
    writer = csv.writer(stream, lineterminator="\n")
    attr_names = [name for name, _ in log.schema]
    writer.writerow([mapping.case_col, mapping.activity_col, mapping.timestamp_col]
                    + attr_names)
    kinds = dict(log.schema)
    for case in log.cases.values():
        for ev in case.events:
            row = [case.case_id, ev.activity,
                   format_timestamp(ev.timestamp_ms, mapping.timestamp_format)]
            cats = dict(ev.cats)
            conts = dict(ev.conts)
            for name in attr_names:
                if kinds[name] == CATEGORICAL:
                    v = cats.get(name, MISSING_LABEL)
                    row.append("" if v == MISSING_LABEL else v)
                else:
                    x = conts.get(name)
                    row.append("" if x is None else repr(x))
            writer.writerow(row)


def compute_stats(log: EventLog, time_unit: str = "seconds") -> DatasetStats:
    """Counts and moments over cases; duration is last minus first timestamp."""
    if log.n_cases == 0:
        raise DataError("cannot compute stats of an empty log")
    lengths = [len(c) for c in log.cases.values()]
    durations = [c.duration_s for c in log.cases.values()]
    variants = {c.activities for c in log.cases.values()}
    activities = {e.activity for c in log.cases.values() for e in c.events}
    divisor = {"seconds": 1.0, "hours": 3600.0, "days": 86400.0}[time_unit]
    durations = [d / divisor for d in durations]
    return DatasetStats(
        n_cases=len(lengths),
        n_events=sum(lengths),
        n_variants=len(variants),
        n_activities=len(activities),
        mean_case_length=statistics.fmean(lengths),
        sd_case_length=_pstdev(lengths),
        mean_case_duration_s=statistics.fmean(durations),
        sd_case_duration_s=_pstdev(durations),
        time_unit=time_unit,
    )


def _pstdev(xs: Iterable[float]) -> float:
    xs = list(xs)
    if len(xs) < 2:
        return 0.0
    m = statistics.fmean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def validate_log(log: EventLog) -> ValidationReport:
    """Report structural issues without mutating the log."""
    report = ValidationReport(
        noncontiguous_case_ids=sorted(log.notes.noncontiguous_ids),
        presort_violations=sorted(log.notes.presort_violations),
    )
    declared = dict(log.schema)
    for case in log.cases.values():
        for ev in case.events:
            have = {name for name, _ in ev.cats} | {name for name, _ in ev.conts}
            for name in declared:
                if name not in have:
                    report.schema_violations.append(f"{case.case_id}/{name}")
            for name, _ in list(ev.cats) + list(ev.conts):
                if name not in declared:
                    report.schema_violations.append(f"{case.case_id}/{name}")
    report.schema_violations = sorted(set(report.schema_violations))
    return report


def stats_table(stats: DatasetStats) -> str:
    """Human-readable one-dataset properties table."""
    rows = [
        ("cases", f"{stats.n_cases}"),
        ("events", f"{stats.n_events}"),
        ("variants", f"{stats.n_variants}"),
        ("activities", f"{stats.n_activities}"),
        ("case length (mean/sd)", f"{stats.mean_case_length:.2f} / {stats.sd_case_length:.2f}"),
        (f"case duration {stats.time_unit} (mean/sd)",
         f"{stats.mean_case_duration_s:.2f} / {stats.sd_case_duration_s:.2f}"),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)
