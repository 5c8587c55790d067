"""CSV ingestion and synthetic cohort generation.

Two CSV layouts are supported through ColumnMapping:

* wide  -- one row per (patient, time); each mapped feature column holds one
           measurement. This is the shape of the public Tongji-hospital export.
* long  -- one row per measurement with explicit feature/value columns. This is
           the canonical form written by write_csv and the documented contract
           for pre-flattened multi-table sources.

Non-numeric measurement cells are dropped with a logged count; empty cells and
NA/NaN markers produce no event at all. Timestamps may be numeric (days) or
ISO datetimes; they are normalized to days since the patient's anchor, which is
the admission time when mapped and the first record otherwise.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import ParseError, SchemaError
from .events import RawEvent, RawEventTable

log = logging.getLogger(__name__)

MISSING_MARKERS = {"", "na", "nan"}


@dataclass
class ColumnMapping:
    patient_id: str
    layout: str = "wide"  # "wide" | "long"
    timestamp: str | None = None
    outcome: str | None = None
    # wide layout: which columns are features / statics. feature_columns=None
    # means "every column not otherwise mapped".
    feature_columns: list[str] | None = None
    static_columns: list[str] = field(default_factory=list)
    # long layout: where the feature name / value live, and which feature names
    # are demographics rather than time series.
    feature_column: str = "feature"
    value_column: str = "value"
    static_features: list[str] = field(default_factory=list)
    # stay length: either an explicit per-patient column (days) or an
    # admission/discharge pair of timestamps.
    los_column: str | None = None
    admission_column: str | None = None
    discharge_column: str | None = None
    dataset_tag: str = "generic"

    @classmethod
    def from_dict(cls, raw: dict) -> "ColumnMapping":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise SchemaError(f"unknown mapping keys: {sorted(unknown)}")
        return cls(**raw)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_MARKERS


def _parse_number(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _parse_time(cell: str, row: int) -> float | datetime:
    """Numeric cells are days; anything else must be an ISO datetime."""
    num = _parse_number(cell)
    if num is not None:
        return num
    try:
        return datetime.fromisoformat(cell.strip())
    except ValueError:
        raise ParseError(f"cannot parse timestamp {cell!r}", row=row) from None


def _parse_outcome(cell: str, row: int) -> int:
    num = _parse_number(cell)
    if num is None or num not in (0.0, 1.0):
        raise ParseError(f"outcome must be 0 or 1, got {cell!r}", row=row)
    return int(num)


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError("empty file", row=1) from None
            rows = []
            for row_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"expected {len(header)} fields, found {len(row)}", row=row_no
                    )
                rows.append((row_no, row))
    except csv.Error as exc:
        raise ParseError(str(exc)) from exc
    return header, rows


def load_csv(path, mapping: ColumnMapping) -> RawEventTable:
    """Parse a UTF-8 comma-delimited CSV into a RawEventTable.

    Returns one RawEvent per non-empty measurement cell. Duplicate
    (patient, timestamp, feature) rows are retained; de-duplication is a
    preprocessing concern.
    """
    header, rows = _read_rows(path)
    col = {name: i for i, name in enumerate(header)}

    def require(name: str) -> int:
        if name not in col:
            raise SchemaError(f"column {name!r} not found in {path}")
        return col[name]

    if mapping.layout not in ("wide", "long"):
        raise SchemaError(f"unknown layout {mapping.layout!r}")

    pid_i = require(mapping.patient_id)
    ts_i = require(mapping.timestamp) if mapping.timestamp else None
    out_i = require(mapping.outcome) if mapping.outcome else None
    los_i = require(mapping.los_column) if mapping.los_column else None
    adm_i = require(mapping.admission_column) if mapping.admission_column else None
    dis_i = require(mapping.discharge_column) if mapping.discharge_column else None

    if mapping.layout == "wide":
        static_cols = list(mapping.static_columns)
        for name in static_cols:
            require(name)
        if mapping.feature_columns is None:
            reserved = {mapping.patient_id, mapping.timestamp, mapping.outcome,
                        mapping.los_column, mapping.admission_column,
                        mapping.discharge_column, *static_cols}
            feature_cols = [name for name in header if name not in reserved]
        else:
            feature_cols = list(mapping.feature_columns)
            for name in feature_cols:
                require(name)
        static_feats = static_cols
    else:
        require(mapping.feature_column)
        require(mapping.value_column)
        feature_cols = []  # discovered from the data
        static_feats = list(mapping.static_features)

    # First pass: collect per-row measurements with raw times, plus per-patient
    # outcome / admission / discharge / los.
    raw: list[tuple[str, object, str, float, bool]] = []  # pid, time, feature, value, static
    outcomes: dict[str, int] = {}
    admission: dict[str, object] = {}
    discharge: dict[str, object] = {}
    explicit_los: dict[str, int] = {}
    statics: dict[tuple[str, str], float] = {}
    n_nonnumeric = 0
    feature_order: dict[str, None] = {}

    for row_no, row in rows:
        pid = row[pid_i].strip()
        if not pid:
            raise ParseError("empty patient id", row=row_no)
        if out_i is not None and not _is_missing(row[out_i]):
            oc = _parse_outcome(row[out_i], row_no)
            if outcomes.setdefault(pid, oc) != oc:
                raise SchemaError(
                    f"patient {pid}: outcome differs across rows (row {row_no})"
                )
        if adm_i is not None and not _is_missing(row[adm_i]):
            admission.setdefault(pid, _parse_time(row[adm_i], row_no))
        if dis_i is not None and not _is_missing(row[dis_i]):
            discharge.setdefault(pid, _parse_time(row[dis_i], row_no))
        if los_i is not None and not _is_missing(row[los_i]):
            v = _parse_number(row[los_i])
            if v is None or v <= 0:
                raise ParseError(f"bad length-of-stay {row[los_i]!r}", row=row_no)
            explicit_los.setdefault(pid, int(math.ceil(v)))

        if mapping.layout == "wide":
            for name in static_feats:
                cell = row[col[name]]
                if _is_missing(cell):
                    continue
                v = _parse_number(cell)
                if v is None:
                    n_nonnumeric += 1
                    continue
                prev = statics.setdefault((pid, name), v)
                if prev != v:
                    raise SchemaError(
                        f"patient {pid}: static feature {name!r} has conflicting "
                        f"values {prev} and {v} (row {row_no})"
                    )
            if ts_i is None or _is_missing(row[ts_i]):
                continue  # rows without a time carry statics only
            when = _parse_time(row[ts_i], row_no)
            for name in feature_cols:
                cell = row[col[name]]
                if _is_missing(cell):
                    continue
                v = _parse_number(cell)
                if v is None:
                    n_nonnumeric += 1
                    continue
                raw.append((pid, when, name, v, False))
        else:
            feat = row[col[mapping.feature_column]].strip()
            if not feat:
                raise ParseError("empty feature name", row=row_no)
            cell = row[col[mapping.value_column]]
            if _is_missing(cell):
                continue
            v = _parse_number(cell)
            if v is None:
                n_nonnumeric += 1
                continue
            if feat in static_feats:
                prev = statics.setdefault((pid, feat), v)
                if prev != v:
                    raise SchemaError(
                        f"patient {pid}: static feature {feat!r} has conflicting "
                        f"values {prev} and {v} (row {row_no})"
                    )
            else:
                feature_order.setdefault(feat, None)
                if ts_i is None or _is_missing(row[ts_i]):
                    continue
                when = _parse_time(row[ts_i], row_no)
                raw.append((pid, when, feat, v, False))

    if n_nonnumeric:
        log.info("dropped %d non-numeric measurement cells", n_nonnumeric)

    # Second pass: anchor times per patient and derive stay lengths.
    anchor: dict[str, object] = {}
    for pid, when, *_ in raw:
        cur = anchor.get(pid)
        if cur is None or _time_lt(when, cur):
            anchor[pid] = when
    for pid, adm in admission.items():
        anchor[pid] = adm  # admission wins as the stay clock origin

    total_los: dict[str, int] = dict(explicit_los)
    for pid, dis in discharge.items():
        if pid in explicit_los or pid not in admission:
            continue
        span = _time_delta_days(admission[pid], dis)
        if span < 0:
            raise SchemaError(f"patient {pid}: discharge precedes admission")
        total_los[pid] = max(1, int(math.ceil(span)))

    events: list[RawEvent] = []
    n_outside = 0
    for pid, when, feat, v, _ in raw:
        t = _time_delta_days(anchor[pid], when)
        if t < 0 or (pid in total_los and t > total_los[pid]):
            n_outside += 1  # record outside the admission..discharge window
            continue
        events.append(RawEvent(pid, t, feat, v, outcomes.get(pid), False))
    if n_outside:
        log.info("dropped %d events outside the recorded stay window", n_outside)

    for (pid, feat), v in sorted(statics.items()):
        events.append(RawEvent(pid, 0.0, feat, v, outcomes.get(pid), True))

    if mapping.layout == "wide":
        feat_names = feature_cols
    else:
        feat_names = list(feature_order)
    table = RawEventTable(
        events=events,
        feature_names=feat_names,
        static_names=list(static_feats),
        dataset_tag=mapping.dataset_tag,
        total_los=total_los,
    )
    table.validate()
    return table


def _time_lt(a, b) -> bool:
    if isinstance(a, datetime) != isinstance(b, datetime):
        raise SchemaError("mixed numeric and datetime timestamps for one patient")
    return a < b


def _time_delta_days(origin, when) -> float:
    if isinstance(origin, datetime) != isinstance(when, datetime):
        raise SchemaError("mixed numeric and datetime timestamps for one patient")
    if isinstance(origin, datetime):
        return (when - origin).total_seconds() / 86400.0
    return float(when) - float(origin)


CANONICAL_HEADER = ["patient_id", "timestamp", "feature", "value", "outcome",
                    "is_static", "total_los"]


def write_csv(table: RawEventTable, path) -> None:
    """Write the canonical long-form CSV; load_csv(canonical_mapping(...)) inverts it."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CANONICAL_HEADER)
        for ev in table.events:
            writer.writerow([
                ev.patient_id,
                repr(ev.timestamp),
                ev.feature,
                "" if ev.value is None else repr(ev.value),
                "" if ev.outcome is None else ev.outcome,
                int(ev.is_static),
                table.total_los.get(ev.patient_id, ""),
            ])


def canonical_mapping(table: RawEventTable) -> ColumnMapping:
    return ColumnMapping(
        patient_id="patient_id",
        layout="long",
        timestamp="timestamp",
        outcome="outcome",
        feature_column="feature",
        value_column="value",
        static_features=list(table.static_names),
        los_column="total_los",
        dataset_tag=table.dataset_tag,
    )


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Knobs for the synthetic EHR generator.

    Feature 0 carries the planted mortality signal (monotone in the latent
    severity that drives the outcome); feature 1 tracks the remaining stay so
    that length-of-stay is learnable. Both relationships vanish when
    signal_strength is 0.
    """

    n_patients: int
    n_features: int
    missing_rate: float = 0.3
    mortality_rate: float = 0.3
    los_median_alive: float = 12.0
    los_median_dead: float = 6.0
    los_sigma: float = 0.55  # lognormal shape for stay lengths
    signal_strength: float = 3.0
    extra_events_rate: float = 0.4  # chance of a 2nd same-day measurement

    def __post_init__(self):
        if self.n_patients <= 0 or self.n_features <= 0:
            raise ValueError("patient and feature counts must be positive")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ValueError("missing_rate must be in [0, 1]")


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def synthesize_cohort(spec: SyntheticSpec, seed: int) -> RawEventTable:
    """Deterministic synthetic RawEventTable with a recoverable mortality signal."""
    rng = np.random.default_rng(seed)
    base_offset = math.log(spec.mortality_rate / (1.0 - spec.mortality_rate))
    feat_names = [f"feat_{j}" for j in range(spec.n_features)]
    feat_base = 10.0 + 5.0 * np.arange(spec.n_features, dtype=float)
    feat_scale = 1.0 + 0.5 * np.arange(spec.n_features, dtype=float)

    events: list[RawEvent] = []
    total_los: dict[str, int] = {}
    for i in range(spec.n_patients):
        pid = f"p{i:05d}"
        severity = float(rng.standard_normal())
        p_death = _sigmoid(spec.signal_strength * severity + base_offset)
        outcome = int(rng.random() < p_death)
        median = spec.los_median_dead if outcome else spec.los_median_alive
        los = max(1, int(round(rng.lognormal(math.log(median), spec.los_sigma))))
        total_los[pid] = los

        age = float(np.clip(60.0 + 6.0 * severity + rng.normal(0.0, 10.0), 18.0, 100.0))
        gender = float(rng.integers(0, 2))
        events.append(RawEvent(pid, 0.0, "age", age, outcome, True))
        events.append(RawEvent(pid, 0.0, "gender", gender, outcome, True))

        for day in range(1, los + 1):
            for j in range(spec.n_features):
                # day-1 severity marker is always measured so no patient is empty
                observed = (day == 1 and j == 0) or rng.random() >= spec.missing_rate
                if not observed:
                    continue
                noise = rng.normal(0.0, 0.6)
                signal = 0.0
                if j == 0:
                    signal = spec.signal_strength * severity
                elif j == 1:
                    signal = spec.signal_strength * 0.4 * (los - day) / max(los, 1)
                value = feat_base[j] + feat_scale[j] * (signal + noise)
                ts = (day - 1) + float(rng.uniform(0.05, 0.95))
                events.append(RawEvent(pid, ts, feat_names[j], value, outcome, False))
                if rng.random() < spec.extra_events_rate:
                    value2 = feat_base[j] + feat_scale[j] * (signal + rng.normal(0.0, 0.6))
                    ts2 = (day - 1) + float(rng.uniform(0.05, 0.95))
                    events.append(
                        RawEvent(pid, ts2, feat_names[j], value2, outcome, False)
                    )

    table = RawEventTable(
        events=events,
        feature_names=feat_names,
        static_names=["age", "gender"],
        dataset_tag="generic",
        total_los=total_los,
    )
    table.validate()
    return table
