"""Raw event tables: the long-form representation every dataset is ingested into.

One RawEvent is one measurement of one feature for one patient. Timestamps are
real-valued days since the patient's anchor (admission when known, otherwise
the first record), so day-level merging is a pure floor(t)+1 operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import SchemaError

DATASET_TAGS = ("tjh_like", "cdsl_like", "generic")


@dataclass(eq=True)
class RawEvent:
    patient_id: str
    timestamp: float  # days since patient anchor; fractional before daily merge
    feature: str
    value: float | None  # None = measured-but-cleaned-away (missing)
    outcome: int | None = None  # 1 = death, 0 = survival
    is_static: bool = False  # demographics: one value per (patient, feature)


@dataclass
class RawEventTable:
    events: list[RawEvent]
    feature_names: list[str]  # ordered dynamic (time-varying) features
    static_names: list[str] = field(default_factory=list)
    dataset_tag: str = "generic"
    total_los: dict[str, int] = field(default_factory=dict)  # patient_id -> stay days
    merged_daily: bool = False
    history: list[dict] = field(default_factory=list)  # applied steps, in order

    def __post_init__(self):
        if self.dataset_tag not in DATASET_TAGS:
            raise SchemaError(f"unknown dataset tag {self.dataset_tag!r}")

    def validate(self) -> None:
        """Check the table invariants; raises SchemaError on violation."""
        known = set(self.feature_names) | set(self.static_names)
        outcomes: dict[str, int] = {}
        static_seen: dict[tuple[str, str], float | None] = {}
        for ev in self.events:
            if ev.feature not in known:
                raise SchemaError(f"event references unknown feature {ev.feature!r}")
            if not math.isfinite(ev.timestamp) or ev.timestamp < 0:
                raise SchemaError(
                    f"patient {ev.patient_id}: bad timestamp {ev.timestamp!r}"
                )
            if ev.outcome is not None:
                prev = outcomes.setdefault(ev.patient_id, ev.outcome)
                if prev != ev.outcome:
                    raise SchemaError(
                        f"patient {ev.patient_id}: conflicting outcomes {prev} and {ev.outcome}"
                    )
            if ev.is_static:
                key = (ev.patient_id, ev.feature)
                if key in static_seen and static_seen[key] != ev.value:
                    raise SchemaError(
                        f"patient {ev.patient_id}: conflicting static values for {ev.feature!r}"
                    )
                static_seen[key] = ev.value

    # -- convenience views -------------------------------------------------

    def patient_ids(self) -> list[str]:
        """Distinct patient ids in first-appearance order."""
        seen: dict[str, None] = {}
        for ev in self.events:
            seen.setdefault(ev.patient_id, None)
        return list(seen)

    def outcome_of(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ev in self.events:
            if ev.outcome is not None:
                out.setdefault(ev.patient_id, ev.outcome)
        return out

    def dynamic_events(self):
        return (ev for ev in self.events if not ev.is_static)

    def static_events(self):
        return (ev for ev in self.events if ev.is_static)

    def record_keys(self) -> set[tuple[str, float]]:
        """Distinct (patient, timestamp) record identities among dynamic events."""
        return {(ev.patient_id, ev.timestamp) for ev in self.dynamic_events()}

    def with_events(self, events: list[RawEvent], step: dict | None = None) -> "RawEventTable":
        """Copy of this table with a new event list and an optional history entry."""
        table = replace(self, events=events, history=list(self.history))
        if step is not None:
            table.history.append(step)
        return table

    def count_nonmissing(self) -> int:
        return sum(1 for ev in self.events if ev.value is not None)


def day_index(timestamp: float) -> int:
    """1-based day of stay containing the given timestamp (in days since anchor)."""
    return int(math.floor(timestamp)) + 1
