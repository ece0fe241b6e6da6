"""Rendering of cross-validation reports into JSON and CSV tables.

Outputs (all deterministic for fixed inputs, so re-rendering a finished run
is byte-identical):

- ``metrics.csv``: one row per model x modality x crop x granularity with
  mean ± SD cells for the five metrics
- ``recognition.csv``: patient recognition rate per setting
- ``ppv_ttest.csv``: pairwise Welch t-tests on PPV distributions, pooled over
  folds and per fold
- ``patients.csv``: per-patient misdiagnosis count, mean PPV and vote margin
- ``report.json``: everything above plus raw per-fold numbers
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from pathlib import Path
from typing import Iterable, Sequence

from .core import Modality
from .errors import MetricsError, ReportError
from .metrics import METRIC_NAMES, CVReport, MeanSD, TTestResult, welch_ttest

FORMATS = ("csv", "json")
MODEL_ORDER = ("alexnet", "resnet18", "voting", "ensemble")
MODALITY_ORDER = tuple(m.value for m in Modality)


def _sort_key(r: CVReport) -> tuple:
    mod = MODALITY_ORDER.index(r.modality) if r.modality in MODALITY_ORDER else len(MODALITY_ORDER)
    model = MODEL_ORDER.index(r.model) if r.model in MODEL_ORDER else len(MODEL_ORDER)
    return (mod, r.modality, int(r.crop), model, r.model)


def _ordered(reports: CVReport | Iterable[CVReport]) -> list[CVReport]:
    reports = [reports] if isinstance(reports, CVReport) else list(reports)
    if not reports:
        raise MetricsError("nothing to report")
    for r in reports:
        if not r.folds:
            raise MetricsError(f"report {r.setting} has no folds")
    return sorted(reports, key=_sort_key)


def _num(v: float | None) -> float | None:
    return None if v is None else round(float(v), 12)


def _msd(m: MeanSD) -> dict:
    return {"mean": _num(m.mean), "sd": _num(m.sd), "n": m.n, "text": m.format()}


def _ttest_row(t: TTestResult) -> dict:
    return {"t": _num(t.t), "p": _num(t.p), "df": _num(t.df), "significant": t.significant,
            "mean_a": _num(t.mean_a), "mean_b": _num(t.mean_b), "n_a": t.n_a, "n_b": t.n_b}


def metric_rows(reports: Sequence[CVReport]) -> list[dict]:
    rows = []
    for r in reports:
        for gran, agg in (("image", r.image_wise), ("patient", r.patient_wise)):
            row = {"modality": r.modality, "crop": "crop" if r.crop else "full", "model": r.model,
                   "granularity": gran}
            row.update({name: agg[name].format() for name in METRIC_NAMES})
            rows.append(row)
    return rows


def recognition_rows(reports: Sequence[CVReport]) -> list[dict]:
    return [{"modality": r.modality, "crop": "crop" if r.crop else "full", "model": r.model,
             "recognition_rate": r.recognition_rate.format()} for r in reports]


def ppv_tests(reports: Sequence[CVReport]) -> list[dict]:
    """Welch t-tests between every pair of settings, pooled and fold by fold."""
    out = []
    for a, b in itertools.combinations(reports, 2):
        scopes = [("pooled", a.pooled_ppv(), b.pooled_ppv())]
        for k in range(min(len(a.folds), len(b.folds))):
            scopes.append((str(k), a.fold_ppv(k), b.fold_ppv(k)))
        for scope, xa, xb in scopes:
            row = {"a": a.setting, "b": b.setting, "scope": scope}
            try:
                row.update(_ttest_row(welch_ttest(xa, xb)))
            except MetricsError as exc:
                row.update({"t": None, "p": None, "df": None, "significant": None, "note": str(exc)})
            out.append(row)
    return out


def patient_rows(reports: Sequence[CVReport]) -> list[dict]:
    rows = []
    for r in reports:
        for p in r.patient_summary():
            rows.append({"setting": r.setting, **{k: (_num(v) if isinstance(v, float) else v)
                                                   for k, v in p.items()}})
    return rows


def report_document(reports: CVReport | Iterable[CVReport]) -> dict:
    reports = _ordered(reports)
    settings = []
    for r in reports:
        settings.append({
            "setting": r.setting,
            "model": r.model,
            "modality": r.modality,
            "crop": r.crop,
            "image_wise": {k: _msd(v) for k, v in r.image_wise.items()},
            "patient_wise": {k: _msd(v) for k, v in r.patient_wise.items()},
            "recognition_rate": _msd(r.recognition_rate),
            "folds": [{
                "fold": f.fold,
                "image_confusion": vars(f.image_cm),
                "patient_confusion": vars(f.patient_cm),
                "image_metrics": {k: _num(v) for k, v in f.image_metrics.as_dict().items()},
                "patient_metrics": {k: _num(v) for k, v in f.patient_metrics.as_dict().items()},
                "recognition_rate": _num(f.recognition_rate),
                "votes": [{"patient_id": v.patient_id, "true_label": v.true_label.code,
                           "predicted": v.predicted.code, "n_images": v.n_images,
                           "n_benign": v.n_benign, "mean_ppv": _num(v.mean_ppv)} for v in f.votes],
            } for f in r.folds],
            "metadata": r.metadata,
        })
    return {
        "settings": settings,
        "tables": {
            "metrics": metric_rows(reports),
            "recognition": recognition_rows(reports),
            "ppv_ttest": ppv_tests(reports),
            "patients": patient_rows(reports),
        },
        "metadata": {"sd": "sample (ddof=1)", "ttest": "welch, two-sided",
                     "alpha": 0.05, "positive_class": "malignant"},
    }


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        fields = list(dict.fromkeys(k for row in rows for k in row))
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def render_report(
    reports: CVReport | Iterable[CVReport],
    out_dir: str | Path,
    formats: Sequence[str] = FORMATS,
) -> list[Path]:
    """Write the report files for ``formats`` into ``out_dir`` and return their paths."""
    bad = [f for f in formats if f not in FORMATS]
    if bad or not formats:
        raise ReportError(f"unsupported report format(s) {bad or formats}; choose from {FORMATS}")
    doc = report_document(reports)
    out_dir = Path(out_dir)
    files: dict[str, str] = {}
    if "json" in formats:
        files["report.json"] = json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if "csv" in formats:
        for name, key in (("metrics.csv", "metrics"), ("recognition.csv", "recognition"),
                          ("ppv_ttest.csv", "ppv_ttest"), ("patients.csv", "patients")):
            files[name] = _csv_text(doc["tables"][key])
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            path = out_dir / name
            path.write_text(text, encoding="utf-8")
            written.append(path)
    except OSError as exc:
        raise ReportError(f"cannot write report to {out_dir}: {exc}") from exc
    return written
