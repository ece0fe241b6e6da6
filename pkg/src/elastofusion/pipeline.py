"""Run-directory orchestration: train, evaluate, explain and compare.

A run directory holds everything needed to re-derive its tables::

    config.yaml          frozen configuration snapshot
    split.json           the patient split plan
    run.json             seeds, model, variant, package version
    fold_<k>/            per-fold predictions_*.csv, history_*.csv, *.ckpt

``compare`` writes one such directory per model x modality x crop cell under
a common parent.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import checkpoint_load
from .config import SNAPSHOT_NAME, RunConfig, read_config_file, validate_config
from .core import Modality
from .dataio import (
    DatasetManifest,
    SplitPlan,
    SynthConfig,
    generate_synthetic,
    parse_manifest,
    prepare_sample,
    split_patients,
)
from .ensemble import EnsembleModel
from .errors import ConfigError, DataError, MetricsError
from .gradcam import Heatmap, display_image, export_heatmap, gradcam_ensemble, gradcam_single, overlay, overlay_name
from .metrics import CVReport, build_cv_report, read_predictions
from .report import render_report
from .training import FeatureCache, cross_validate, stream_seed

log = logging.getLogger(__name__)

RUN_INFO = "run.json"
SPLIT_NAME = "split.json"


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- data -------------------------------------------------------------------------------------

def synth_config(cfg: RunConfig) -> SynthConfig:
    s = cfg.data.synth
    return SynthConfig(
        n_patients=s.n_patients, images_per_patient=tuple(s.images_per_patient),
        class_balance=s.class_balance, signal_channels=s.signal, image_size=s.image_size,
        seed=cfg.seed, roi_margin=s.roi_margin,
    )


def make_synthetic(cfg: RunConfig, out_dir: str | Path | None = None) -> DatasetManifest:
    return generate_synthetic(synth_config(cfg), out_dir or cfg.io.data_dir)


def resolve_manifest(cfg: RunConfig) -> DatasetManifest:
    """The configured manifest, or a synthetic set generated into ``io.data_dir``."""
    if cfg.data.manifest:
        return parse_manifest(cfg.data.manifest)
    existing = Path(cfg.io.data_dir) / "manifest.jsonl"
    if existing.exists():
        return parse_manifest(existing)
    log.info("no manifest configured; generating a synthetic set in %s", cfg.io.data_dir)
    return make_synthetic(cfg)


def make_split(cfg: RunConfig, manifest: DatasetManifest) -> SplitPlan:
    plan = split_patients(manifest, cfg.data.test_fraction, stream_seed(cfg.seed, "split"), cfg.data.n_folds)
    plan.validate(manifest)
    return plan


# -- training ---------------------------------------------------------------------------------

def _write_run_info(run_dir: Path, cfg: RunConfig, model: str, manifest: DatasetManifest,
                    plan: SplitPlan) -> None:
    tc = cfg.train_config()
    info = {
        "model": model,
        "modality": tc.modality.value,
        "crop": tc.crop,
        "variant": tc.variant,
        "manifest": str(manifest.source) if manifest.source else None,
        "seeds": {"run": cfg.seed, "split": plan.seed},
        "n_folds": plan.n_folds,
        "version": version_string(),
    }
    (run_dir / RUN_INFO).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_run(
    cfg: RunConfig,
    *,
    manifest: DatasetManifest | None = None,
    plan: SplitPlan | None = None,
    cache: FeatureCache | None = None,
    run_dir: str | Path | None = None,
):
    """Cross-validate ``cfg.model.name`` and record everything in the run directory."""
    manifest = manifest if manifest is not None else resolve_manifest(cfg)
    plan = plan if plan is not None else make_split(cfg, manifest)
    run_dir = Path(run_dir or cfg.io.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if manifest.source is not None:
        data = cfg.data.model_copy(update={"manifest": str(Path(manifest.source).resolve())})
        cfg = cfg.model_copy(update={"data": data})
    cfg.save(run_dir / SNAPSHOT_NAME)
    plan.save(run_dir / SPLIT_NAME)
    _write_run_info(run_dir, cfg, cfg.model.name, manifest, plan)
    return cross_validate(manifest, plan, cfg.train_config(), cfg.model.name,
                          cache=cache, run_dir=run_dir)


# -- reading finished runs -----------------------------------------------------------------------

@dataclass
class RunInfo:
    path: Path
    config: RunConfig
    info: dict

    @property
    def fold_dirs(self) -> list[Path]:
        return [self.path / f"fold_{k}" for k in range(self.info["n_folds"])]

    def prediction_names(self) -> list[str]:
        first = self.fold_dirs[0]
        names = sorted(p.stem[len("predictions_"):] for p in first.glob("predictions_*.csv"))
        return sorted(names, key=lambda n: (n != self.info["model"], n))


def open_run(run_dir: str | Path) -> RunInfo:
    run_dir = Path(run_dir)
    info_path = run_dir / RUN_INFO
    if not info_path.exists():
        raise DataError(f"{run_dir} is not a run directory (no {RUN_INFO})")
    cfg = validate_config(read_config_file(run_dir / SNAPSHOT_NAME))
    return RunInfo(run_dir, cfg, json.loads(info_path.read_text(encoding="utf-8")))


def run_dirs(path: str | Path) -> list[Path]:
    """``path`` itself if it is a run, else its run subdirectories (a comparison)."""
    path = Path(path)
    if (path / RUN_INFO).exists():
        return [path]
    found = sorted(p for p in path.iterdir() if (p / RUN_INFO).exists()) if path.is_dir() else []
    if not found:
        raise DataError(f"no run directories under {path}")
    return found


def run_reports(run_dir: str | Path, names: Sequence[str] | None = None) -> list[CVReport]:
    """Rebuild reports from stored prediction files; no model is needed."""
    run = open_run(run_dir)
    reports = []
    for name in names or run.prediction_names():
        folds = []
        for fdir in run.fold_dirs:
            path = fdir / f"predictions_{name}.csv"
            if not path.exists():
                raise DataError(f"missing prediction file {path}")
            folds.append(read_predictions(path))
        reports.append(build_cv_report(folds, name, run.info["modality"], run.info["crop"],
                                       expected_folds=run.info["n_folds"]))
    return reports


def collect_reports(path: str | Path, include_members: bool = True) -> list[CVReport]:
    reports: list[CVReport] = []
    seen = set()
    for d in run_dirs(path):
        for r in run_reports(d):
            if not include_members and r.model != open_run(d).info["model"]:
                continue
            if r.setting in seen:
                continue
            seen.add(r.setting)
            reports.append(r)
    return reports


def report_run(path: str | Path, formats: Sequence[str], out_dir: str | Path | None = None) -> list[Path]:
    reports = collect_reports(path)
    return render_report(reports, out_dir or Path(path) / "report", formats)


# -- Grad-CAM ---------------------------------------------------------------------------------------

def gradcam_run(
    run_dir: str | Path,
    image_id: str,
    *,
    fold: int = 0,
    model: str | None = None,
    target_class: int | None = None,
    out_dir: str | Path | None = None,
    export_raw: bool = False,
) -> tuple[Heatmap, Path]:
    run = open_run(run_dir)
    name = model or run.info["model"]
    ckpt = run.path / f"fold_{fold}" / f"{name}.ckpt"
    if not ckpt.exists():
        raise DataError(f"no checkpoint {ckpt}")
    net = checkpoint_load(ckpt)
    if not run.config.data.manifest:
        raise ConfigError("run snapshot does not record a manifest")
    manifest = parse_manifest(run.config.data.manifest)
    try:
        record = manifest.image(image_id)
    except KeyError:
        raise DataError(f"image {image_id!r} not in manifest") from None
    sample = prepare_sample(manifest, record, Modality.parse(run.info["modality"]),
                            crop=bool(run.info["crop"]))
    if isinstance(net, EnsembleModel):
        heat = gradcam_ensemble(net, sample, target_class)
    else:
        heat = gradcam_single(net, sample, target_class)
    out_dir = Path(out_dir) if out_dir else run.path / "gradcam"
    png = overlay(heat, display_image(sample), out_dir / overlay_name(image_id, sample.modality, heat.target_class))
    if export_raw:
        export_heatmap(heat, png.with_suffix(".npy"))
    return heat, png


# -- model comparison ---------------------------------------------------------------------------------

def compare_models(cfg: RunConfig, *, manifest: DatasetManifest | None = None,
                   out_dir: str | Path | None = None) -> list[CVReport]:
    """Cross-validate every model x modality x crop cell and render one comparison report.

    Cells share the split plan and a feature cache. When an ensemble cell is
    run, the members trained inside it also provide the single-backbone rows
    for that setting, and the soft-voting row is included if
    ``eval.voting`` is set.
    """
    models = cfg.model.compare or ([cfg.model.name] if cfg.model.name else [])
    if not models:
        raise ConfigError("compare needs at least one model")
    modalities = cfg.eval.modalities or [cfg.train.modality]
    crops = cfg.eval.crops or [cfg.train.crop]
    manifest = manifest if manifest is not None else resolve_manifest(cfg)
    plan = make_split(cfg, manifest)
    parent = Path(out_dir or cfg.io.run_dir)
    cache = FeatureCache()

    reports: dict[str, CVReport] = {}
    for modality in modalities:
        for crop in crops:
            cells = ["ensemble"] if "ensemble" in models else []
            cells += [m for m in models if m != "ensemble"]
            for model in cells:
                setting = f"{model}/{modality}/{'crop' if crop else 'full'}"
                if setting in reports:
                    continue
                cell_cfg = cfg.model_copy(update={
                    "model": cfg.model.model_copy(update={"name": model}),
                    "train": cfg.train.model_copy(update={"modality": modality, "crop": crop}),
                })
                cell_dir = parent / f"{model}_{modality}_{'crop' if crop else 'full'}"
                train_run(cell_cfg, manifest=manifest, plan=plan, cache=cache, run_dir=cell_dir)
                for rep in run_reports(cell_dir):
                    wanted = rep.model in models or (rep.model == "voting" and cfg.eval.voting)
                    if wanted and rep.setting not in reports:
                        reports[rep.setting] = rep
    if not reports:
        raise MetricsError("comparison produced no reports")
    render_report(list(reports.values()), parent / "report", cfg.eval.formats)
    return list(reports.values())


__all__ = [
    "RunInfo", "collect_reports", "compare_models", "gradcam_run", "make_split", "make_synthetic",
    "open_run", "report_run", "resolve_manifest", "run_reports", "synth_config", "train_run",
    "version_string",
]
