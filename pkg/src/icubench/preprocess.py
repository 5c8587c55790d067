"""Event-table cleaning and cohort construction.

Step order is fixed: domain range rules -> constant-feature drop -> three-sigma
outlier filter -> day-level merge -> sparse-feature drop -> statistics. Outlier
statistics are therefore computed before merging dilutes them. Normalization
and imputation are fitted on a training partition and applied per split (see
fit_normalization / prepare_split), so run_pipeline leaves matrices raw unless
explicitly asked to fit on the whole cohort.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, FeatureStats, PatientSeries, derive_labels
from .errors import PipelineError
from .events import RawEvent, RawEventTable, day_index

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Cleaning steps (RawEventTable -> RawEventTable)
# ---------------------------------------------------------------------------

@dataclass
class RangeRule:
    """Closed physiological interval; values outside become missing."""

    feature: str
    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"{self.feature}: empty interval [{self.lo}, {self.hi}]")


def clean_domain_rules(table: RawEventTable, rules: list[RangeRule]) -> RawEventTable:
    """Replace out-of-range values with missing; unknown features are skipped."""
    by_feature = {}
    for rule in rules:
        if rule.feature not in table.feature_names:
            log.warning("range rule for unknown feature %r skipped", rule.feature)
            continue
        by_feature[rule.feature] = rule
    replaced = {name: 0 for name in by_feature}
    events = []
    for ev in table.events:
        rule = by_feature.get(ev.feature) if not ev.is_static else None
        if rule is not None and ev.value is not None and not (rule.lo <= ev.value <= rule.hi):
            events.append(RawEvent(ev.patient_id, ev.timestamp, ev.feature, None,
                                   ev.outcome, ev.is_static))
            replaced[ev.feature] += 1
        else:
            events.append(ev)
    step = {
        "step": "clean_domain_rules",
        "rules": [{"feature": r.feature, "lo": r.lo, "hi": r.hi} for r in rules],
        "replaced": replaced,
    }
    return table.with_events(events, step)


def clean_three_sigma(table: RawEventTable) -> RawEventTable:
    """Replace values with |z| > 3 by missing, z from the feature's raw mean/std.

    Uses the population standard deviation over all observed events of the
    feature; features with fewer than two observations or zero spread are left
    untouched. The comparison is strict, so a value at exactly z = 3 survives.
    """
    values: dict[str, list[float]] = {name: [] for name in table.feature_names}
    for ev in table.dynamic_events():
        if ev.value is not None:
            values[ev.feature].append(ev.value)
    bounds = {}
    for name, vals in values.items():
        if len(vals) < 2:
            continue
        arr = np.asarray(vals, dtype=float)
        mean = float(arr.mean())
        std = float(arr.std())
        if std == 0.0:
            continue
        bounds[name] = (mean, std)
    replaced = {name: 0 for name in bounds}
    events = []
    for ev in table.events:
        if not ev.is_static and ev.value is not None and ev.feature in bounds:
            mean, std = bounds[ev.feature]
            if abs(ev.value - mean) / std > 3.0:
                events.append(RawEvent(ev.patient_id, ev.timestamp, ev.feature,
                                       None, ev.outcome, ev.is_static))
                replaced[ev.feature] += 1
                continue
        events.append(ev)
    step = {"step": "clean_three_sigma",
            "replaced": {k: v for k, v in replaced.items() if v}}
    return table.with_events(events, step)


def drop_constant_features(table: RawEventTable) -> RawEventTable:
    """Remove time-varying features whose observed values are all identical.

    Never-observed features are vacuously constant and are removed too.
    """
    distinct: dict[str, set[float]] = {name: set() for name in table.feature_names}
    for ev in table.dynamic_events():
        if ev.value is not None:
            distinct[ev.feature].add(ev.value)
    dropped = [name for name in table.feature_names if len(distinct[name]) <= 1]
    kept = [name for name in table.feature_names if name not in set(dropped)]
    events = [ev for ev in table.events if ev.is_static or ev.feature not in set(dropped)]
    step = {"step": "drop_constant_features", "dropped": dropped}
    out = table.with_events(events, step)
    out.feature_names = kept
    return out


def merge_daily(table: RawEventTable) -> RawEventTable:
    """Collapse same-day measurements of a feature to their mean.

    Day d covers timestamps in [d-1, d); merged events sit at timestamp d-1 so
    the operation is idempotent. Groups whose values were all cleaned away
    disappear (they are plain missing data after merging).
    """
    groups: dict[tuple[str, str, int], list[float]] = {}
    outcomes = table.outcome_of()
    for ev in table.dynamic_events():
        key = (ev.patient_id, ev.feature, day_index(ev.timestamp))
        bucket = groups.setdefault(key, [])
        if ev.value is not None:
            bucket.append(ev.value)
    events = []
    for (pid, feature, day), vals in groups.items():
        if not vals:
            continue
        mean = float(np.mean(np.asarray(vals, dtype=float)))
        events.append(RawEvent(pid, float(day - 1), feature, mean,
                               outcomes.get(pid), False))
    events.extend(table.static_events())
    step = {"step": "merge_daily"}
    out = table.with_events(events, step)
    out.merged_daily = True
    return out


def _record_keys_observed(table: RawEventTable) -> set[tuple[str, float]]:
    return {(ev.patient_id, ev.timestamp)
            for ev in table.dynamic_events() if ev.value is not None}


def drop_sparse_features(table: RawEventTable, threshold: float) -> RawEventTable:
    """Remove features observed in too few day-records (missing rate > threshold)."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    records = _record_keys_observed(table)
    n_records = len(records)
    if n_records == 0:
        raise PipelineError("no observed records; cannot compute missing rates")
    seen: dict[str, set[tuple[str, float]]] = {name: set() for name in table.feature_names}
    for ev in table.dynamic_events():
        if ev.value is not None:
            seen[ev.feature].add((ev.patient_id, ev.timestamp))
    dropped = [name for name in table.feature_names
               if 1.0 - len(seen[name]) / n_records > threshold]
    if len(dropped) == len(table.feature_names):
        raise PipelineError("sparse-feature filter removed every feature")
    kept = [name for name in table.feature_names if name not in set(dropped)]
    events = [ev for ev in table.events if ev.is_static or ev.feature not in set(dropped)]
    step = {"step": "drop_sparse_features", "threshold": threshold, "dropped": dropped}
    out = table.with_events(events, step)
    out.feature_names = kept
    return out


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

def _trimmed(values: np.ndarray) -> tuple[float, float]:
    """Mean/std (population) over the closed 5-95% quantile range.

    Quantiles use linear interpolation; this convention is pinned because
    alternatives shift the trim boundaries.
    """
    lo, hi = np.percentile(values, [5.0, 95.0])
    inside = values[(values >= lo) & (values <= hi)]
    if inside.size == 0:  # can only happen with pathological spacing
        inside = values
    return float(inside.mean()), float(inside.std())


def stats_from_values(name: str, values: np.ndarray, missing_rate: float) -> FeatureStats:
    if values.size == 0:
        # never observed: all-zero stats and full missingness; normalization
        # maps such a feature to zeros (see normalize_zscore)
        return FeatureStats(name, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    tm, ts = _trimmed(values)
    return FeatureStats(
        name=name,
        mean=float(values.mean()),
        std=float(values.std()),
        min=float(values.min()),
        max=float(values.max()),
        median=float(np.median(values)),
        missing_rate=missing_rate,
        trimmed_mean=tm,
        trimmed_std=ts,
    )


def compute_feature_stats(table: RawEventTable) -> list[FeatureStats]:
    """Per-feature statistics; missing rates are relative to observed records.

    Dynamic features count against distinct (patient, timestamp) records (these
    are day-records after merge_daily); statics count against patients.
    """
    records = _record_keys_observed(table)
    n_records = max(len(records), 1)
    per_feature: dict[str, list[float]] = {name: [] for name in table.feature_names}
    per_feature_records: dict[str, set] = {name: set() for name in table.feature_names}
    for ev in table.dynamic_events():
        if ev.value is not None:
            per_feature[ev.feature].append(ev.value)
            per_feature_records[ev.feature].add((ev.patient_id, ev.timestamp))
    out = []
    for name in table.feature_names:
        vals = np.asarray(per_feature[name], dtype=float)
        rate = 1.0 - len(per_feature_records[name]) / n_records
        out.append(stats_from_values(name, vals, rate))

    patients = table.patient_ids()
    n_patients = max(len(patients), 1)
    static_vals: dict[str, list[float]] = {name: [] for name in table.static_names}
    for ev in table.static_events():
        if ev.value is not None:
            static_vals[ev.feature].append(ev.value)
    for name in table.static_names:
        vals = np.asarray(static_vals[name], dtype=float)
        out.append(stats_from_values(name, vals, 1.0 - vals.size / n_patients))
    return out


def _is_binary(values: np.ndarray) -> bool:
    return values.size > 0 and bool(np.all((values == 0.0) | (values == 1.0)))


def normalize_zscore(table: RawEventTable, stats: list[FeatureStats]) -> RawEventTable:
    """Z-score observed values with trimmed statistics: (x - mean) / std.

    Applies to every time-varying feature and to continuous statics; binary
    statics (e.g. gender) are left as-is. Features with zero trimmed spread map
    to all-zeros. The caller is responsible for fitting `stats` on the
    training partition only.
    """
    by_name = {s.name: s for s in stats}
    missing = [n for n in table.feature_names + table.static_names if n not in by_name]
    if missing:
        raise PipelineError(f"no statistics for features: {missing}")
    static_values: dict[str, list[float]] = {n: [] for n in table.static_names}
    for ev in table.static_events():
        if ev.value is not None:
            static_values[ev.feature].append(ev.value)
    skip_static = {n for n, vals in static_values.items()
                   if _is_binary(np.asarray(vals, dtype=float))}
    events = []
    warned = set()
    for ev in table.events:
        if ev.value is None or (ev.is_static and ev.feature in skip_static):
            events.append(ev)
            continue
        st = by_name[ev.feature]
        if st.trimmed_std == 0.0:
            if ev.feature not in warned:
                log.warning("feature %r has zero trimmed spread; mapped to zeros",
                            ev.feature)
                warned.add(ev.feature)
            value = 0.0
        else:
            value = (ev.value - st.trimmed_mean) / st.trimmed_std
        events.append(RawEvent(ev.patient_id, ev.timestamp, ev.feature, value,
                               ev.outcome, ev.is_static))
    step = {"step": "normalize_zscore", "skipped_binary_statics": sorted(skip_static)}
    return table.with_events(events, step)


# ---------------------------------------------------------------------------
# Imputation and labels (PatientSeries level)
# ---------------------------------------------------------------------------

def impute_forward_fill(series: PatientSeries, global_medians: np.ndarray,
                        static_medians: np.ndarray | None = None) -> PatientSeries:
    """Last-observation-carried-forward; leading gaps take the global median.

    Medians must live in the same value space as the series (normalized if the
    series is normalized). The observation mask is preserved unchanged.
    """
    if np.any(np.isnan(global_medians)):
        raise PipelineError("missing global median: feature never observed in "
                            "the fitting partition")
    out = series.copy()
    T, F = out.matrix.shape
    for j in range(F):
        last = global_medians[j]
        col = out.matrix[:, j]
        for i in range(T):
            if out.mask[i, j]:
                last = col[i]
            else:
                col[i] = last
    if static_medians is not None:
        if np.any(np.isnan(static_medians)):
            raise PipelineError("missing global median for a static feature")
        fill = ~out.statics_mask
        out.statics[fill] = static_medians[fill]
    return out


# ---------------------------------------------------------------------------
# Pipeline driver
# ---------------------------------------------------------------------------

TJH_PROFILE = "tjh"
CDSL_PROFILE = "cdsl"
IDENTITY_PROFILE = "identity"


@dataclass
class PipelineConfig:
    profile: str = "custom"  # tjh | cdsl | identity | custom
    domain_rules: list[RangeRule] = field(default_factory=list)
    drop_constant: bool = False
    three_sigma: bool = False
    merge: bool = True
    sparse_threshold: float | None = None
    fit_stats: str = "per_split"  # per_split | cohort

    def __post_init__(self):
        if self.profile == TJH_PROFILE:
            self.drop_constant = True
            self.three_sigma = True
            self.merge = True
            self.sparse_threshold = None
        elif self.profile == CDSL_PROFILE:
            self.merge = True
            if self.sparse_threshold is None:
                self.sparse_threshold = 0.9
        elif self.profile == IDENTITY_PROFILE:
            self.domain_rules = []
            self.drop_constant = False
            self.three_sigma = False
            self.merge = False
            self.sparse_threshold = None
        elif self.profile != "custom":
            raise ValueError(f"unknown pipeline profile {self.profile!r}")
        if self.fit_stats not in ("per_split", "cohort"):
            raise ValueError(f"unknown fit_stats mode {self.fit_stats!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        rules = [RangeRule(r["feature"],
                           float(r.get("lo", -math.inf)),
                           float(r.get("hi", math.inf)))
                 for r in raw.pop("domain_rules", [])]
        return cls(domain_rules=rules, **raw)


def apply_steps(table: RawEventTable, config: PipelineConfig) -> RawEventTable:
    """Run the event-level cleaning steps in the fixed order."""
    if config.domain_rules:
        table = clean_domain_rules(table, config.domain_rules)
    if config.drop_constant:
        table = drop_constant_features(table)
    if config.three_sigma:
        table = clean_three_sigma(table)
    if config.merge:
        table = merge_daily(table)
    if config.sparse_threshold is not None:
        table = drop_sparse_features(table, config.sparse_threshold)
    return table


def build_cohort(table: RawEventTable) -> Cohort:
    """Assemble day-level patient matrices from a cleaned table.

    Patients without a known outcome or without a single observed day-record
    are dropped (and counted in provenance). Values sharing a (patient,
    feature, day) cell are averaged, which is a no-op on day-merged tables.
    """
    feat_idx = {name: j for j, name in enumerate(table.feature_names)}
    stat_idx = {name: j for j, name in enumerate(table.static_names)}
    outcomes = table.outcome_of()

    cells: dict[str, dict[int, dict[int, list[float]]]] = {}
    statics: dict[str, np.ndarray] = {}
    order: dict[str, None] = {}
    for ev in table.events:
        order.setdefault(ev.patient_id, None)
        if ev.is_static:
            vec = statics.setdefault(ev.patient_id,
                                     np.full(len(stat_idx), np.nan))
            if ev.value is not None and ev.feature in stat_idx:
                vec[stat_idx[ev.feature]] = ev.value
        elif ev.value is not None:
            day = day_index(ev.timestamp)
            cells.setdefault(ev.patient_id, {}).setdefault(day, {}) \
                 .setdefault(feat_idx[ev.feature], []).append(ev.value)

    patients = []
    dropped_no_outcome = 0
    dropped_empty = 0
    for pid in order:
        if pid not in outcomes:
            dropped_no_outcome += 1
            continue
        days_map = cells.get(pid, {})
        if not days_map:
            dropped_empty += 1
            continue
        days = np.asarray(sorted(days_map), dtype=int)
        F = len(feat_idx)
        matrix = np.full((len(days), F), np.nan)
        for i, day in enumerate(days.tolist()):
            for j, vals in days_map[day].items():
                matrix[i, j] = float(np.mean(np.asarray(vals, dtype=float)))
        mask = ~np.isnan(matrix)
        svec = statics.get(pid, np.full(len(stat_idx), np.nan))
        los = table.total_los.get(pid, int(days[-1]))
        series = PatientSeries(
            patient_id=pid,
            days=days,
            matrix=matrix,
            mask=mask,
            statics=svec,
            statics_mask=~np.isnan(svec),
            outcome=outcomes[pid],
            total_los=los,
        )
        derive_labels(series)
        patients.append(series)

    if not patients:
        raise PipelineError("no usable patients after preprocessing")
    provenance = list(table.history)
    provenance.append({
        "step": "derive_labels",
        "dropped_no_outcome": dropped_no_outcome,
        "dropped_no_records": dropped_empty,
    })
    return Cohort(
        patients=patients,
        feature_names=list(table.feature_names),
        static_names=list(table.static_names),
        provenance=provenance,
    )


def run_pipeline(table: RawEventTable, config: PipelineConfig) -> Cohort:
    """Full preprocessing: cleaning steps, cohort assembly, dataset statistics.

    In per_split mode (the default) matrices stay raw; normalization and
    imputation are fitted by the harness on each split's training partition.
    In cohort mode the whole-cohort statistics are applied immediately.
    """
    if not table.events:
        raise PipelineError("empty event table")
    cleaned = apply_steps(table, config)
    cohort = build_cohort(cleaned)
    cohort.feature_stats = compute_feature_stats(cleaned)
    if config.fit_stats == "cohort":
        stats = fit_normalization(cohort, cohort.patient_ids())
        cohort = prepare_split(cohort, stats)
    return cohort


def replay_provenance(table: RawEventTable, provenance: list[dict]) -> Cohort:
    """Re-run the recorded steps on a raw table; reproduces the same cohort."""
    current = table
    cohort = None
    fitted_on = None
    for entry in provenance:
        step = entry["step"]
        if step == "clean_domain_rules":
            rules = [RangeRule(r["feature"], r["lo"], r["hi"]) for r in entry["rules"]]
            current = clean_domain_rules(current, rules)
        elif step == "drop_constant_features":
            current = drop_constant_features(current)
        elif step == "clean_three_sigma":
            current = clean_three_sigma(current)
        elif step == "merge_daily":
            current = merge_daily(current)
        elif step == "drop_sparse_features":
            current = drop_sparse_features(current, entry["threshold"])
        elif step == "derive_labels":
            cohort = build_cohort(current)
            cohort.feature_stats = compute_feature_stats(current)
        elif step == "fit_normalization":
            fitted_on = entry["fitted_on"]
        elif step in ("normalize", "impute"):
            pass
        else:
            raise PipelineError(f"cannot replay unknown step {step!r}")
    if cohort is None:
        raise PipelineError("provenance has no label-derivation step")
    if fitted_on is not None:
        stats = fit_normalization(cohort, fitted_on)
        cohort = prepare_split(cohort, stats)
    return cohort


# ---------------------------------------------------------------------------
# Split-level normalization (leakage-safe)
# ---------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    """Everything fitted on a training partition and applied elsewhere."""

    feature: list[FeatureStats]
    statics: list[FeatureStats]
    normalize_static: list[bool]  # False for binary statics such as gender
    medians: np.ndarray  # raw-space per-feature medians (imputation fallback)
    static_medians: np.ndarray
    los_mean: float  # trimmed stats of the remaining-stay regression target
    los_std: float
    horizon: float  # 95th-percentile stay length (the metric horizon E)
    fitted_on: list[str] = field(default_factory=list)

    def normalized_medians(self) -> np.ndarray:
        out = np.empty_like(self.medians)
        for j, st in enumerate(self.feature):
            if st.trimmed_std == 0.0:
                out[j] = 0.0
            else:
                out[j] = (self.medians[j] - st.trimmed_mean) / st.trimmed_std
        return out

    def normalized_static_medians(self) -> np.ndarray:
        out = self.static_medians.copy()
        for j, st in enumerate(self.statics):
            if not self.normalize_static[j]:
                continue
            if st.trimmed_std == 0.0:
                out[j] = 0.0
            else:
                out[j] = (self.static_medians[j] - st.trimmed_mean) / st.trimmed_std
        return out

    def normalize_los(self, los: np.ndarray) -> np.ndarray:
        if self.los_std == 0.0:
            return np.zeros_like(los)
        return (los - self.los_mean) / self.los_std

    def denormalize_los(self, values: np.ndarray) -> np.ndarray:
        return np.maximum(values * self.los_std + self.los_mean, 0.0)


def fit_normalization(cohort: Cohort, train_ids, horizon_mode: str = "train") -> NormalizationStats:
    """Fit trimmed feature stats, imputation medians, target stats and the
    metric horizon on the given training patients."""
    train = set(train_ids)
    train_patients = [p for p in cohort.patients if p.patient_id in train]
    if not train_patients:
        raise PipelineError("empty training partition")
    F = len(cohort.feature_names)
    S = len(cohort.static_names)

    feat_stats = []
    medians = np.full(F, np.nan)
    for j, name in enumerate(cohort.feature_names):
        chunks = [p.matrix[p.mask[:, j], j] for p in train_patients]
        vals = np.concatenate(chunks) if chunks else np.empty(0)
        if vals.size == 0:
            raise PipelineError(
                f"feature {name!r} never observed in the training partition"
            )
        feat_stats.append(stats_from_values(name, vals, _miss_rate(train_patients, j)))
        medians[j] = float(np.median(vals))

    stat_stats = []
    static_medians = np.full(S, np.nan)
    normalize_static = []
    for j, name in enumerate(cohort.static_names):
        vals = np.asarray([p.statics[j] for p in train_patients
                           if p.statics_mask[j]], dtype=float)
        if vals.size == 0:
            raise PipelineError(
                f"static feature {name!r} never observed in the training partition"
            )
        rate = 1.0 - vals.size / len(train_patients)
        stat_stats.append(stats_from_values(name, vals, rate))
        static_medians[j] = float(np.median(vals))
        normalize_static.append(not _is_binary(vals))

    los_vals = np.concatenate([p.remaining_los for p in train_patients])
    los_mean, los_std = _trimmed(los_vals)
    if horizon_mode == "train":
        stays = [p.total_los for p in train_patients]
    elif horizon_mode == "cohort":
        stays = [p.total_los for p in cohort.patients]
    else:
        raise ValueError(f"unknown horizon mode {horizon_mode!r}")
    horizon = float(np.percentile(np.asarray(stays, dtype=float), 95.0))

    return NormalizationStats(
        feature=feat_stats,
        statics=stat_stats,
        normalize_static=normalize_static,
        medians=medians,
        static_medians=static_medians,
        los_mean=los_mean,
        los_std=los_std,
        horizon=horizon,
        fitted_on=sorted(train),
    )


def _miss_rate(patients: list[PatientSeries], j: int) -> float:
    total = sum(len(p.days) for p in patients)
    seen = sum(int(p.mask[:, j].sum()) for p in patients)
    return 1.0 - seen / total if total else 1.0


def normalize_series(series: PatientSeries, stats: NormalizationStats) -> PatientSeries:
    out = series.copy()
    for j, st in enumerate(stats.feature):
        col = out.matrix[:, j]
        obs = out.mask[:, j]
        if st.trimmed_std == 0.0:
            col[obs] = 0.0
        else:
            col[obs] = (col[obs] - st.trimmed_mean) / st.trimmed_std
    for j, st in enumerate(stats.statics):
        if not stats.normalize_static[j] or not out.statics_mask[j]:
            continue
        if st.trimmed_std == 0.0:
            out.statics[j] = 0.0
        else:
            out.statics[j] = (out.statics[j] - st.trimmed_mean) / st.trimmed_std
    return out


def prepare_split(cohort: Cohort, stats: NormalizationStats) -> Cohort:
    """Normalize then impute every patient with training-partition statistics."""
    med = stats.normalized_medians()
    smed = stats.normalized_static_medians()
    patients = [impute_forward_fill(normalize_series(p, stats), med, smed)
                for p in cohort.patients]
    return Cohort(
        patients=patients,
        feature_names=cohort.feature_names,
        static_names=cohort.static_names,
        feature_stats=cohort.feature_stats,
        provenance=cohort.provenance + [
            {"step": "fit_normalization", "fitted_on": stats.fitted_on,
             "horizon": stats.horizon},
            {"step": "normalize"},
            {"step": "impute"},
        ],
    )
