"""Patient-level evaluation splits with outcome stratification.

All randomness flows through numpy's PCG64 generator so identical seeds give
identical splits everywhere. Fractional partition sizes are resolved per
outcome class with the largest-remainder method; remainder ties go to the
later partition (train < val < test), which also fixes how odd patients land
in holdout splits. Splits never separate the records of one patient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort
from .errors import SplitError


@dataclass
class FoldPlan:
    k: int
    assignments: dict[str, int]  # patient_id -> fold in [0, k)
    seed: int

    def fold_members(self, i: int) -> list[str]:
        return sorted(pid for pid, f in self.assignments.items() if f == i)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"k": self.k, "seed": self.seed,
                       "assignments": self.assignments}, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "FoldPlan":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(k=raw["k"], assignments=raw["assignments"], seed=raw["seed"])


@dataclass
class SplitTriple:
    train: set[str] = field(default_factory=set)
    val: set[str] = field(default_factory=set)
    test: set[str] = field(default_factory=set)

    def validate(self, cohort_ids) -> None:
        ids = set(cohort_ids)
        parts = [self.train, self.val, self.test]
        union = self.train | self.val | self.test
        if sum(len(p) for p in parts) != len(union):
            raise SplitError("partitions overlap")
        if union != ids:
            raise SplitError("partitions do not cover the cohort")

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"train": sorted(self.train), "val": sorted(self.val),
                       "test": sorted(self.test)}, fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "SplitTriple":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(train=set(raw["train"]), val=set(raw["val"]), test=set(raw["test"]))


def largest_remainder(total: int, weights) -> list[int]:
    """Integer allocation of `total` proportional to `weights`.

    Each cell is within 1 of its exact quota; remainder ties are broken toward
    the later cell.
    """
    weights = [float(w) for w in weights]
    denom = sum(weights)
    if denom <= 0:
        raise SplitError("weights must sum to a positive value")
    quotas = [total * w / denom for w in weights]
    base = [int(q) for q in quotas]
    shortfall = total - sum(base)
    order = sorted(range(len(weights)), key=lambda j: (-(quotas[j] - base[j]), -j))
    for j in order[:shortfall]:
        base[j] += 1
    return base


def _classes(outcomes: dict[str, int]) -> dict[int, list[str]]:
    """Patients per outcome class, in sorted-id order (the shuffle base order)."""
    by_class: dict[int, list[str]] = {}
    for pid in sorted(outcomes):
        by_class.setdefault(outcomes[pid], []).append(pid)
    return by_class


def _allocate(outcomes: dict[str, int], weights, rng) -> list[set[str]]:
    """Shuffle each class and deal it into partitions by largest remainder."""
    parts = [set() for _ in weights]
    for label in sorted(_classes(outcomes)):
        members = _classes(outcomes)[label]
        idx = rng.permutation(len(members))
        shuffled = [members[i] for i in idx]
        counts = largest_remainder(len(members), weights)
        pos = 0
        for j, c in enumerate(counts):
            parts[j].update(shuffled[pos:pos + c])
            pos += c
    return parts


def stratified_kfold(cohort: Cohort, k: int, seed: int) -> FoldPlan:
    """Assign patients to k folds, preserving the outcome proportion per fold.

    Fold sizes differ by at most one patient and each fold's positive count is
    within one patient of the cohort proportion.
    """
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    outcomes = cohort.outcomes()
    by_class = _classes(outcomes)
    for label, members in by_class.items():
        if len(members) < k:
            raise SplitError(
                f"outcome class {label} has {len(members)} patients, fewer than k={k}"
            )
    n = len(outcomes)
    fold_sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for label in sorted(by_class):
        members = by_class[label]
        idx = rng.permutation(len(members))
        shuffled = [members[i] for i in idx]
        counts = largest_remainder(len(members), fold_sizes)
        pos = 0
        for fold, c in enumerate(counts):
            for pid in shuffled[pos:pos + c]:
                assignments[pid] = fold
            pos += c
    return FoldPlan(k=k, assignments=assignments, seed=seed)


def cv_iteration(plan: FoldPlan, i: int, train_val_ratio=(8, 1),
                 seed: int | None = None, outcomes: dict[str, int] | None = None) -> SplitTriple:
    """Cross-validation iteration i: fold i is the test set, the rest is split
    into train/val at the given ratio, stratified by outcome."""
    if not 0 <= i < plan.k:
        raise SplitError(f"fold index {i} out of range [0, {plan.k})")
    if outcomes is None:
        raise SplitError("cv_iteration needs the patient outcomes for stratification")
    seed = plan.seed if seed is None else seed
    test = {pid for pid, f in plan.assignments.items() if f == i}
    rest = {pid: outcomes[pid] for pid in plan.assignments if pid not in test}
    rng = np.random.default_rng([seed, i])
    train, val = _allocate(rest, train_val_ratio, rng)
    triple = SplitTriple(train=train, val=val, test=test)
    triple.validate(plan.assignments)
    return triple


def holdout_split(cohort: Cohort, ratios=(8, 1, 1), seed: int = 0) -> SplitTriple:
    """Single stratified train/val/test split (default 8:1:1)."""
    outcomes = cohort.outcomes()
    if len(outcomes) < 10:
        raise SplitError(f"cohort too small for a holdout split: {len(outcomes)}")
    if len(ratios) != 3:
        raise SplitError("holdout expects three ratio terms")
    rng = np.random.default_rng(seed)
    train, val, test = _allocate(outcomes, ratios, rng)
    triple = SplitTriple(train=train, val=val, test=test)
    triple.validate(outcomes)
    return triple
