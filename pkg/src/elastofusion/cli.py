"""Command-line entry point.

Subcommands: ``synth``, ``split``, ``train``, ``eval``, ``gradcam``, ``report``
and ``compare``. Settings merge as config file < environment < flags.

Exit codes:

==== ==========================================
0    success (also ``--help``)
2    usage error: unknown subcommand or flag
3    configuration error
4    data error: manifest, images, split
5    runtime failure: model, training, metrics
==== ==========================================
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import RunConfig, load_config
from .core import CLASS_NAMES
from .dataio import SplitPlan
from .errors import ConfigError, DataError, ElastoFusionError
from .metrics import METRIC_NAMES
from . import pipeline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RUNTIME = 5

log = logging.getLogger("elastofusion")


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so that ``run_command`` can return a code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageExit(EXIT_USAGE)


class _UsageExit(Exception):
    def __init__(self, code: int):
        self.code = code


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _crop_list(value: str) -> list[bool]:
    out = []
    for v in _list(value):
        if v not in ("crop", "full"):
            raise argparse.ArgumentTypeError(f"crop setting must be 'crop' or 'full', got {v!r}")
        out.append(v == "crop")
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="master seed for every random stream")
    p.add_argument("--cache-dir", help="directory holding pretrained weight files")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest (JSONL); default: synthetic data")
    p.add_argument("--run", dest="run_dir", help="run directory to write")
    p.add_argument("--modality", choices=["b", "se", "bse"])
    p.add_argument("--crop", action=argparse.BooleanOptionalAction, default=None,
                   help="crop to the lesion ROI before resizing")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--head-epochs", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--weights", help="'auto', 'imagenet', 'random' or a weight file")
    p.add_argument("--freeze-policy")
    p.add_argument("--inflation", choices=["zero", "mean"])
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--folds", type=int, dest="n_folds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="elastofusion", description="Dual-modality ultrasound ensemble pipeline.",
                     allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--patients", type=int, dest="n_patients")
    p.add_argument("--signal", choices=["gray", "color", "both"])
    p.add_argument("--balance", type=float, dest="class_balance", help="fraction of malignant patients")
    p.add_argument("--out", dest="data_dir", help="output directory")

    p = sub.add_parser("split", help="build a patient-wise split plan", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--folds", type=int, dest="n_folds")
    p.add_argument("--out", type=Path, help="where to write the plan (JSON)")

    p = sub.add_parser("train", help="cross-validate one model", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--model", choices=["alexnet", "resnet18", "resnet", "ensemble"])
    p.add_argument("--split", type=Path, help="use an existing split plan")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="metrics from stored predictions", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--run", dest="run_dir", required=True)
    p.add_argument("--patient-wise", action="store_true", help="show patient-wise metrics only")
    p.add_argument("--model", help="prediction set to evaluate (default: all)")

    p = sub.add_parser("gradcam", help="Grad-CAM overlay for one image", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--run", dest="run_dir", required=True)
    p.add_argument("--image", required=True, help="image id from the manifest")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--model", help="checkpoint to explain (default: the run's model)")
    p.add_argument("--target-class", choices=list(CLASS_NAMES), help="default: predicted class")
    p.add_argument("--out", type=Path)
    p.add_argument("--export-raw", action="store_true", help="also save the heatmap as .npy")

    p = sub.add_parser("report", help="render report tables for a run", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--run", dest="run_dir", required=True)
    p.add_argument("--format", dest="formats", type=_list, action="append",
                   help="csv, json or both (comma separated)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("compare", help="cross-validate a grid of models and modalities", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--models", type=_list, help="e.g. alexnet,resnet18,ensemble")
    p.add_argument("--modalities", type=_list, help="e.g. b,se,bse")
    p.add_argument("--crops", type=_crop_list, help="crop, full or crop,full")
    p.add_argument("--voting", action=argparse.BooleanOptionalAction, default=None)
    _add_train_flags(p)
    return parser


def _flags_to_overrides(args: argparse.Namespace) -> dict:
    """Map parsed flags onto config sections, skipping unset ones."""
    table = {
        "seed": ("seed",),
        "cache_dir": ("io", "cache_dir"),
        "run_dir": ("io", "run_dir"),
        "data_dir": ("io", "data_dir"),
        "manifest": ("data", "manifest"),
        "test_fraction": ("data", "test_fraction"),
        "n_folds": ("data", "n_folds"),
        "n_patients": ("data", "synth", "n_patients"),
        "signal": ("data", "synth", "signal"),
        "class_balance": ("data", "synth", "class_balance"),
        "modality": ("train", "modality"),
        "crop": ("train", "crop"),
        "max_epochs": ("train", "max_epochs"),
        "patience": ("train", "patience"),
        "learning_rate": ("train", "learning_rate"),
        "batch_size": ("train", "batch_size"),
        "head_epochs": ("train", "head_epochs"),
        "augment": ("train", "augment"),
        "weights": ("model", "weights"),
        "freeze_policy": ("model", "freeze_policy"),
        "inflation": ("model", "inflation"),
        "models": ("model", "compare"),
        "modalities": ("eval", "modalities"),
        "crops": ("eval", "crops"),
        "voting": ("eval", "voting"),
    }
    if args.command in ("train", "compare") and getattr(args, "model", None):
        table["model"] = ("model", "name")
    out: dict = {}
    for attr, path in table.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    if getattr(args, "formats", None):
        out.setdefault("eval", {})["formats"] = [f for group in args.formats for f in group]
    return out


# -- subcommands ------------------------------------------------------------------------------------

def _cmd_synth(cfg: RunConfig, args) -> int:
    manifest = pipeline.make_synthetic(cfg)
    print(f"wrote {manifest.n_patients} patients / {manifest.n_images} image pairs to {manifest.source}")
    return EXIT_OK


def _cmd_split(cfg: RunConfig, args) -> int:
    manifest = pipeline.resolve_manifest(cfg)
    plan = pipeline.make_split(cfg, manifest)
    out = args.out or Path(cfg.io.run_dir) / pipeline.SPLIT_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    sizes = ", ".join(str(len(f)) for f in plan.folds)
    print(f"test: {len(plan.test_patients)} patients; folds: {sizes}; written to {out}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig, args) -> int:
    cfg.train_config()  # fail fast on missing or inconsistent training settings
    manifest = pipeline.resolve_manifest(cfg)
    plan = None
    if args.split is not None:
        try:
            plan = SplitPlan.load(args.split)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read split plan {args.split}: {exc}") from None
    result = pipeline.train_run(cfg, manifest=manifest, plan=plan)
    print(f"trained {result.model} on {len(result.folds)} folds; run directory {cfg.io.run_dir}")
    return EXIT_OK


def _format_rows(reports, granularity: str) -> str:
    grans = ["image", "patient"] if granularity == "both" else [granularity]
    header = ["setting", "granularity", *METRIC_NAMES, "recognition_rate"]
    rows = [header]
    for r in reports:
        for g in grans:
            agg = r.image_wise if g == "image" else r.patient_wise
            rows.append([r.setting, g, *(agg[m].format() for m in METRIC_NAMES), r.recognition_rate.format()])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


def _cmd_eval(cfg: RunConfig, args) -> int:
    reports = []
    for d in pipeline.run_dirs(args.run_dir):
        reports.extend(pipeline.run_reports(d, [args.model] if args.model else None))
    granularity = "patient" if args.patient_wise else cfg.eval.granularity
    print(_format_rows(reports, granularity))
    return EXIT_OK


def _cmd_gradcam(cfg: RunConfig, args) -> int:
    target = None if args.target_class is None else CLASS_NAMES.index(args.target_class)
    heat, path = pipeline.gradcam_run(args.run_dir, args.image, fold=args.fold, model=args.model,
                                      target_class=target, out_dir=args.out, export_raw=args.export_raw)
    print(f"{path} (target {CLASS_NAMES[heat.target_class]}, peak at {heat.peak})")
    return EXIT_OK


def _cmd_report(cfg: RunConfig, args) -> int:
    for path in pipeline.report_run(args.run_dir, cfg.eval.formats, args.out):
        print(path)
    return EXIT_OK


def _cmd_compare(cfg: RunConfig, args) -> int:
    cfg.train_config()
    reports = pipeline.compare_models(cfg)
    print(_format_rows(reports, cfg.eval.granularity))
    return EXIT_OK


COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcam": _cmd_gradcam,
    "report": _cmd_report,
    "compare": _cmd_compare,
}


def _snapshot_config(args) -> Path | None:
    """Commands that read a finished run default to its frozen config."""
    if args.config is None and args.command in ("eval", "gradcam", "report"):
        candidate = Path(args.run_dir) / "config.yaml"
        if candidate.exists():
            return candidate
    return args.config


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except _UsageExit as exc:
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(_snapshot_config(args), flags=_flags_to_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ElastoFusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort boundary of the process
        log.debug("unhandled failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
