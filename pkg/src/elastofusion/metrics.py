"""Evaluation metrics: confusion matrices, patient-wise majority voting, global
patient recognition rate, predictive probability values and Welch t-tests.

The positive class is malignant throughout. Ratios with a zero denominator
are reported as ``None`` rather than 0 so that fold aggregation can skip them.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .core import Label
from .errors import MetricsError

METRIC_NAMES = ("accuracy", "precision", "specificity", "sensitivity", "f1")
PREDICTION_FIELDS = ("image_id", "patient_id", "true_label", "p_benign", "p_malignant")
SIGNIFICANCE_LEVEL = 0.05


# -- per-image predictions ----------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    image_id: str
    patient_id: str
    true_label: Label
    p_benign: float
    p_malignant: float

    @property
    def predicted(self) -> Label:
        # exact ties go to malignant
        return Label.BENIGN if self.p_benign > self.p_malignant else Label.MALIGNANT

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label

    @property
    def ppv(self) -> float:
        return self.p_benign if self.true_label == Label.BENIGN else self.p_malignant


def predictions_from_probs(probs, truths, image_ids, patient_ids) -> list[Prediction]:
    probs = np.asarray(probs, dtype=np.float64)
    return [
        Prediction(str(i), str(p), Label(int(t)), float(row[0]), float(row[1]))
        for row, t, i, p in zip(probs, truths, image_ids, patient_ids)
    ]


def write_predictions(preds: Iterable[Prediction], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_FIELDS)
        for p in preds:
            w.writerow([p.image_id, p.patient_id, p.true_label.code, repr(p.p_benign), repr(p.p_malignant)])
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise MetricsError(f"{path}: missing columns {sorted(missing)}")
        return [
            Prediction(
                row["image_id"], row["patient_id"], Label.parse(row["true_label"]),
                float(row["p_benign"]), float(row["p_malignant"]),
            )
            for row in reader
        ]


# -- confusion matrix and metrics --------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predictions: Sequence, truths: Sequence, positive: Label = Label.MALIGNANT) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise MetricsError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    tp = fp = tn = fn = 0
    for p, t in zip(predictions, truths):
        pp, tt = int(p) == positive, int(t) == positive
        if pp and tt:
            tp += 1
        elif pp:
            fp += 1
        elif tt:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float | None
    precision: float | None
    specificity: float | None
    sensitivity: float | None
    f1: float | None

    def as_dict(self) -> dict[str, float | None]:
        return asdict(self)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise MetricsError("cannot compute metrics on an empty confusion matrix")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    sensitivity = _ratio(cm.tp, cm.tp + cm.fn)
    if precision is None or sensitivity is None:
        f1 = None
    else:
        f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
    return Metrics(
        accuracy=(cm.tp + cm.tn) / cm.total,
        precision=precision,
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        sensitivity=sensitivity,
        f1=f1,
    )


# -- patient-wise voting ----------------------------------------------------------------

def patient_vote(predicted: Sequence) -> Label:
    """Benign only on a strict benign majority; ties and the rest are malignant."""
    n = len(predicted)
    if n == 0:
        raise MetricsError("patient has no images")
    n_benign = sum(1 for p in predicted if int(p) == Label.BENIGN)
    return Label.BENIGN if n_benign > n - n_benign else Label.MALIGNANT


@dataclass(frozen=True)
class PatientVote:
    patient_id: str
    true_label: Label
    n_images: int
    n_benign: int
    n_correct: int
    predicted: Label
    mean_ppv: float

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label

    @property
    def margin(self) -> float:
        """Signed vote margin in [-1, 1]; positive leans benign."""
        return (2 * self.n_benign - self.n_images) / self.n_images


def group_by_patient(preds: Iterable[Prediction]) -> dict[str, list[Prediction]]:
    groups: dict[str, list[Prediction]] = defaultdict(list)
    for p in preds:
        groups[p.patient_id].append(p)
    return dict(sorted(groups.items()))


def patient_votes(preds: Iterable[Prediction]) -> list[PatientVote]:
    votes = []
    for pid, items in group_by_patient(preds).items():
        truths = {p.true_label for p in items}
        if len(truths) != 1:
            raise MetricsError(f"patient {pid} has images with different true labels")
        votes.append(PatientVote(
            patient_id=pid,
            true_label=items[0].true_label,
            n_images=len(items),
            n_benign=sum(p.predicted == Label.BENIGN for p in items),
            n_correct=sum(p.correct for p in items),
            predicted=patient_vote([p.predicted for p in items]),
            mean_ppv=float(np.mean([p.ppv for p in items])),
        ))
    return votes


def patient_recognition_rate(table: Iterable[tuple[int, int]]) -> float:
    """Mean over patients of ``n_correct / n_images``; ``table`` holds those pairs."""
    rows = list(table)
    if not rows:
        raise MetricsError("empty patient set")
    total = 0.0
    for n_correct, n_images in rows:
        if n_images < 1 or not 0 <= n_correct <= n_images:
            raise MetricsError(f"invalid patient row ({n_correct}, {n_images})")
        total += n_correct / n_images
    return total / len(rows)


# -- predictive probability values ------------------------------------------------------

@dataclass(frozen=True)
class PPVSample:
    image_id: str
    true_label: Label
    ppv: float


def ppv_extract(probs, truths, image_ids: Sequence[str] | None = None, *, atol: float = 1e-4) -> list[PPVSample]:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 2 or len(probs) != len(truths):
        raise MetricsError("expected an N x 2 probability matrix and N labels")
    if np.any(probs < 0) or np.any(probs > 1) or np.any(np.abs(probs.sum(axis=1) - 1) > atol):
        raise MetricsError("rows must be probability distributions")
    ids = image_ids if image_ids is not None else [str(i) for i in range(len(probs))]
    return [PPVSample(str(i), Label(int(t)), float(row[int(t)])) for row, t, i in zip(probs, truths, ids)]


# -- Welch t-test --------------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int
    alpha: float = SIGNIFICANCE_LEVEL

    @property
    def significant(self) -> bool:
        return self.p < self.alpha


def welch_ttest(sample_a, sample_b, alpha: float = SIGNIFICANCE_LEVEL) -> TTestResult:
    """Two-sided unequal-variance t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise MetricsError("each sample needs at least two observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricsError("samples must be finite")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise MetricsError("both samples have zero variance")
    sa, sb = va / a.size, vb / b.size
    se = math.sqrt(sa + sb)
    t = (a.mean() - b.mean()) / se
    df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = float(2.0 * stats.t.sf(abs(t), df))
    return TTestResult(float(t), min(p, 1.0), float(df), float(a.mean()), float(b.mean()), a.size, b.size, alpha)


# -- aggregation ------------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanSD:
    mean: float | None
    sd: float | None
    n: int

    def format(self, scale: float = 100.0, digits: int = 2) -> str:
        if self.mean is None:
            return "n/a"
        sd = 0.0 if self.sd is None else self.sd
        return f"{self.mean * scale:.{digits}f} ± {sd * scale:.{digits}f}"


def mean_sd(values: Iterable[float | None]) -> MeanSD:
    """Arithmetic mean and sample (n-1) SD, skipping undefined entries."""
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return MeanSD(None, None, 0)
    arr = np.asarray(vals)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else None
    return MeanSD(float(arr.mean()), sd, arr.size)


def aggregate_cv(fold_metrics: Sequence[Metrics | dict]) -> dict[str, MeanSD]:
    if len(fold_metrics) < 2:
        raise MetricsError("aggregation needs at least two folds")
    rows = [m.as_dict() if isinstance(m, Metrics) else dict(m) for m in fold_metrics]
    return {name: mean_sd(r.get(name) for r in rows) for name in rows[0]}


# -- evaluation of one fold / a whole cross-validation -----------------------------------------

@dataclass
class FoldEvaluation:
    fold: int
    image_cm: ConfusionMatrix
    image_metrics: Metrics
    patient_cm: ConfusionMatrix
    patient_metrics: Metrics
    votes: list[PatientVote]
    recognition_rate: float
    ppv: list[PPVSample]


def evaluate_fold(preds: Sequence[Prediction], fold: int = 0) -> FoldEvaluation:
    if not preds:
        raise MetricsError("no predictions to evaluate")
    image_cm = confusion([p.predicted for p in preds], [p.true_label for p in preds])
    votes = patient_votes(preds)
    patient_cm = confusion([v.predicted for v in votes], [v.true_label for v in votes])
    return FoldEvaluation(
        fold=fold,
        image_cm=image_cm,
        image_metrics=compute_metrics(image_cm),
        patient_cm=patient_cm,
        patient_metrics=compute_metrics(patient_cm),
        votes=votes,
        recognition_rate=patient_recognition_rate((v.n_correct, v.n_images) for v in votes),
        ppv=[PPVSample(p.image_id, p.true_label, p.ppv) for p in preds],
    )


@dataclass
class CVReport:
    model: str
    modality: str
    crop: bool
    folds: list[FoldEvaluation]
    image_wise: dict[str, MeanSD] = field(default_factory=dict)
    patient_wise: dict[str, MeanSD] = field(default_factory=dict)
    recognition_rate: MeanSD | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def setting(self) -> str:
        return f"{self.model}/{self.modality}/{'crop' if self.crop else 'full'}"

    def pooled_ppv(self) -> np.ndarray:
        return np.asarray([s.ppv for f in self.folds for s in f.ppv])

    def fold_ppv(self, k: int) -> np.ndarray:
        return np.asarray([s.ppv for s in self.folds[k].ppv])

    def patient_summary(self) -> list[dict]:
        """Per-patient audit across folds: misdiagnosis count, mean PPV and vote margin."""
        acc: dict[str, dict] = {}
        for f in self.folds:
            for v in f.votes:
                row = acc.setdefault(v.patient_id, {
                    "patient_id": v.patient_id, "true_label": v.true_label.code,
                    "misdiagnosed": 0, "folds": 0, "ppv": [], "margin": [], "predicted": [],
                })
                row["folds"] += 1
                row["misdiagnosed"] += int(not v.correct)
                row["ppv"].append(v.mean_ppv)
                row["margin"].append(v.margin)
                row["predicted"].append(v.predicted.code)
        out = []
        for pid, row in sorted(acc.items()):
            out.append({
                "patient_id": pid,
                "true_label": row["true_label"],
                "misdiagnosed_folds": row["misdiagnosed"],
                "folds": row["folds"],
                "mean_ppv": float(np.mean(row["ppv"])),
                "mean_vote_margin": float(np.mean(row["margin"])),
                "majority_prediction": max(sorted(set(row["predicted"])), key=row["predicted"].count),
            })
        return out


def build_cv_report(
    fold_predictions: Sequence[Sequence[Prediction]],
    model: str,
    modality: str,
    crop: bool,
    expected_folds: int | None = 5,
) -> CVReport:
    if expected_folds is not None and len(fold_predictions) != expected_folds:
        raise MetricsError(f"expected {expected_folds} folds, got {len(fold_predictions)}")
    folds = [evaluate_fold(p, k) for k, p in enumerate(fold_predictions)]
    return CVReport(
        model=model,
        modality=modality,
        crop=crop,
        folds=folds,
        image_wise=aggregate_cv([f.image_metrics for f in folds]),
        patient_wise=aggregate_cv([f.patient_metrics for f in folds]),
        recognition_rate=mean_sd(f.recognition_rate for f in folds),
        metadata={"sd": "sample (ddof=1)", "ttest": "welch", "positive_class": "malignant",
                  "n_folds": len(folds)},
    )
