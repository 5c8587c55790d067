"""Cohorts: per-patient day-level matrices plus feature statistics and provenance.

A PatientSeries row exists for every stay day with at least one observation;
unobserved cells are NaN until imputation, and the boolean mask remembers what
was really measured. Matrices stay in raw units until a split-specific
normalization is applied by the harness.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DataError, PipelineError


@dataclass
class FeatureStats:
    name: str
    mean: float
    std: float  # population (ddof=0)
    min: float
    max: float
    median: float
    missing_rate: float
    trimmed_mean: float  # over the 5-95% quantile range
    trimmed_std: float

    def __post_init__(self):
        if self.std < 0 or self.trimmed_std < 0:
            raise DataError(f"{self.name}: negative standard deviation")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise DataError(f"{self.name}: missing rate {self.missing_rate} out of [0,1]")
        if not self.min <= self.median <= self.max:
            raise DataError(f"{self.name}: min/median/max out of order")


@dataclass
class PatientSeries:
    patient_id: str
    days: np.ndarray  # (T,) int, 1-based, strictly increasing
    matrix: np.ndarray  # (T, F) float64, NaN where unobserved
    mask: np.ndarray  # (T, F) bool, True = observed before imputation
    statics: np.ndarray  # (S,) float64, NaN where unobserved
    statics_mask: np.ndarray  # (S,) bool
    outcome: int  # 1 = death
    total_los: int
    remaining_los: np.ndarray = field(default=None)  # (T,) float, raw days

    def validate(self) -> None:
        T, F = self.matrix.shape
        if self.days.shape != (T,) or self.mask.shape != (T, F):
            raise DataError(f"patient {self.patient_id}: inconsistent array shapes")
        if T == 0:
            raise DataError(f"patient {self.patient_id}: no recorded days")
        if np.any(np.diff(self.days) <= 0):
            raise DataError(f"patient {self.patient_id}: days not strictly increasing")
        if self.total_los < int(self.days[-1]):
            raise DataError(
                f"patient {self.patient_id}: recorded day {int(self.days[-1])} "
                f"exceeds stay length {self.total_los}"
            )
        if self.outcome not in (0, 1):
            raise DataError(f"patient {self.patient_id}: outcome must be 0 or 1")

    def copy(self) -> "PatientSeries":
        return PatientSeries(
            patient_id=self.patient_id,
            days=self.days.copy(),
            matrix=self.matrix.copy(),
            mask=self.mask.copy(),
            statics=self.statics.copy(),
            statics_mask=self.statics_mask.copy(),
            outcome=self.outcome,
            total_los=self.total_los,
            remaining_los=None if self.remaining_los is None else self.remaining_los.copy(),
        )


def derive_labels(series: PatientSeries) -> PatientSeries:
    """Fill remaining_los[t] = L - t for every recorded day t (raw days)."""
    series.validate()
    if int(series.days[-1]) > series.total_los:
        raise DataError(
            f"patient {series.patient_id}: day beyond end of stay"
        )
    series.remaining_los = series.total_los - series.days.astype(float)
    if np.any(series.remaining_los < 0):
        raise DataError(f"patient {series.patient_id}: negative remaining stay")
    return series


@dataclass
class Cohort:
    patients: list[PatientSeries]
    feature_names: list[str]
    static_names: list[str]
    feature_stats: list[FeatureStats] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        F = len(self.feature_names)
        S = len(self.static_names)
        for p in self.patients:
            if p.matrix.shape[1] != F or p.statics.shape[0] != S:
                raise PipelineError(
                    f"patient {p.patient_id}: feature dimension mismatch"
                )

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def by_id(self) -> dict[str, PatientSeries]:
        return {p.patient_id: p for p in self.patients}

    def outcomes(self) -> dict[str, int]:
        return {p.patient_id: p.outcome for p in self.patients}

    def subset(self, ids) -> "Cohort":
        wanted = set(ids)
        return Cohort(
            patients=[p for p in self.patients if p.patient_id in wanted],
            feature_names=self.feature_names,
            static_names=self.static_names,
            feature_stats=self.feature_stats,
            provenance=list(self.provenance),
        )

    def n_records(self) -> int:
        return sum(len(p.days) for p in self.patients)

    def stats_by_name(self) -> dict[str, FeatureStats]:
        return {s.name: s for s in self.feature_stats}


# ---------------------------------------------------------------------------
# Serialization: one CSV per patient matrix plus a JSON metadata file.
# ---------------------------------------------------------------------------

def save_cohort(cohort: Cohort, out_dir) -> None:
    out = Path(out_dir)
    patients_dir = out / "patients"
    patients_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "feature_names": cohort.feature_names,
        "static_names": cohort.static_names,
        "feature_stats": [asdict(s) for s in cohort.feature_stats],
        "provenance": cohort.provenance,
        "patients": [],
    }
    for p in cohort.patients:
        meta["patients"].append({
            "patient_id": p.patient_id,
            "outcome": p.outcome,
            "total_los": p.total_los,
            "statics": [None if not m else v
                        for v, m in zip(p.statics.tolist(), p.statics_mask.tolist())],
        })
        with open(patients_dir / f"{p.patient_id}.csv", "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["day"] + cohort.feature_names)
            for i, day in enumerate(p.days.tolist()):
                row = [day]
                for j in range(p.matrix.shape[1]):
                    row.append(repr(float(p.matrix[i, j])) if p.mask[i, j] else "")
                writer.writerow(row)
    with open(out / "cohort.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_cohort(in_dir) -> Cohort:
    src = Path(in_dir)
    with open(src / "cohort.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    feature_names = meta["feature_names"]
    patients = []
    for entry in meta["patients"]:
        pid = entry["patient_id"]
        days, rows, mask_rows = [], [], []
        with open(src / "patients" / f"{pid}.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                days.append(int(row[0]))
                vals = [float(c) if c else np.nan for c in row[1:]]
                rows.append(vals)
                mask_rows.append([bool(c) for c in row[1:]])
        statics = np.array([np.nan if v is None else float(v)
                            for v in entry["statics"]], dtype=float)
        series = PatientSeries(
            patient_id=pid,
            days=np.asarray(days, dtype=int),
            matrix=np.asarray(rows, dtype=float).reshape(len(days), len(feature_names)),
            mask=np.asarray(mask_rows, dtype=bool).reshape(len(days), len(feature_names)),
            statics=statics,
            statics_mask=~np.isnan(statics),
            outcome=int(entry["outcome"]),
            total_los=int(entry["total_los"]),
        )
        derive_labels(series)
        patients.append(series)
    return Cohort(
        patients=patients,
        feature_names=feature_names,
        static_names=meta["static_names"],
        feature_stats=[FeatureStats(**s) for s in meta["feature_stats"]],
        provenance=meta["provenance"],
    )
