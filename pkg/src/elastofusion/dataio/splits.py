"""Patient-exclusive, label-stratified test / k-fold splitting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import Label
from ..errors import LeakageError, SplitError
from .manifest import DatasetManifest

N_FOLDS = 5


@dataclass(frozen=True)
class SplitPlan:
    test_patients: frozenset[str]
    folds: tuple[frozenset[str], ...]
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def fold_partition(self, k: int) -> tuple[list[str], list[str]]:
        """Return sorted ``(train, validation)`` patient ids for fold ``k``."""
        if not 0 <= k < self.n_folds:
            raise IndexError(f"fold {k} out of range")
        train = sorted(set().union(*(f for i, f in enumerate(self.folds) if i != k)))
        return train, sorted(self.folds[k])

    def partition_of(self, patient_id: str) -> str:
        if patient_id in self.test_patients:
            return "test"
        for k, fold in enumerate(self.folds):
            if patient_id in fold:
                return f"fold{k}"
        raise KeyError(patient_id)

    def validate(self, manifest: DatasetManifest | None = None) -> None:
        """Leakage guard. Raises :class:`LeakageError` on any overlap or gap."""
        parts = [("test", self.test_patients)] + [(f"fold{k}", f) for k, f in enumerate(self.folds)]
        for i, (name_a, a) in enumerate(parts):
            for name_b, b in parts[i + 1:]:
                shared = a & b
                if shared:
                    raise LeakageError(f"{name_a} and {name_b} share patients {sorted(shared)[:5]}")
        if manifest is not None:
            covered = set().union(*(p for _, p in parts))
            expected = set(manifest.patients)
            if covered != expected:
                missing = sorted(expected - covered)[:5]
                extra = sorted(covered - expected)[:5]
                raise LeakageError(f"split does not cover manifest: missing {missing}, unknown {extra}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_patients": sorted(self.test_patients),
            "folds": [sorted(f) for f in self.folds],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitPlan":
        return cls(
            frozenset(data["test_patients"]),
            tuple(frozenset(f) for f in data["folds"]),
            int(data["seed"]),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def split_patients(
    manifest: DatasetManifest,
    test_fraction: float,
    seed: int,
    n_folds: int = N_FOLDS,
) -> SplitPlan:
    """Hold out ``test_fraction`` of patients, then deal the rest into folds.

    Both steps are stratified by label. The number of test patients is
    ``round(test_fraction * n_patients)``, shared between classes in
    proportion to their counts; every fold must receive both classes.
    """
    if manifest.n_patients == 0:
        raise SplitError("manifest has no patients")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)

    by_class = {lab: manifest.patient_ids(lab) for lab in Label}
    n_total = manifest.n_patients
    n_test = int(round(test_fraction * n_total))
    n_test_benign = int(round(n_test * len(by_class[Label.BENIGN]) / n_total))
    n_test_by_class = {Label.BENIGN: n_test_benign, Label.MALIGNANT: n_test - n_test_benign}

    test: set[str] = set()
    remaining: dict[Label, list[str]] = {}
    for lab in Label:
        ids = list(by_class[lab])
        rng.shuffle(ids)
        k = n_test_by_class[lab]
        if k < 1 or len(ids) - k < n_folds:
            raise SplitError(
                f"too few {lab.name.lower()} patients ({len(ids)}) for a test set and {n_folds} "
                "folds that all contain both classes"
            )
        test.update(ids[:k])
        remaining[lab] = ids[k:]

    # deal class by class, continuing the round-robin so fold sizes stay within one
    folds: list[set[str]] = [set() for _ in range(n_folds)]
    pos = 0
    for lab in Label:
        for pid in remaining[lab]:
            folds[pos % n_folds].add(pid)
            pos += 1

    plan = SplitPlan(frozenset(test), tuple(frozenset(f) for f in folds), int(seed))
    plan.validate(manifest)
    return plan
