"""Versioned, checksummed model archives.

Layout: ``MAGIC | uint16 format version | sha256(payload) | payload`` where the
payload is a ``torch.save`` of ``{"metadata": ..., "groups": ..., "state": ...}``.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import torch
import torch.nn as nn

from . import __version__
from .backbones import Backbone, inflate_input_channels, load_backbone
from .ensemble import EnsembleModel
from .errors import CheckpointVersionError, ChecksumError, ShapeError

MAGIC = b"EFCKPT\x00"
FORMAT_VERSION = 1
_HEADER = len(MAGIC) + 2 + 32


def _group_index(model: nn.Module) -> dict[str, list[str]]:
    """Map ``<extractor>/<group>`` names to state-dict keys."""
    index: dict[str, list[str]] = {}
    keyed = {id(p): k for k, p in model.state_dict(keep_vars=True).items()}
    backbones = [("", model)] if isinstance(model, Backbone) else [
        ("extractor_a/", model.extractor_a), ("extractor_b/", model.extractor_b)
    ]
    for prefix, bb in backbones:
        for stage in bb.stages:
            keys = [keyed[id(t)] for t in list(stage.module.parameters()) + list(stage.module.buffers())
                    if id(t) in keyed]
            index[prefix + stage.group] = sorted(keys)
    if isinstance(model, EnsembleModel):
        index["head"] = ["head.weight", "head.bias"]
    return index


def checkpoint_save(model: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    if not isinstance(model, (Backbone, EnsembleModel)):
        raise TypeError("only Backbone and EnsembleModel checkpoints are supported")
    meta = dict(model.metadata())
    meta["format_version"] = FORMAT_VERSION
    meta["package_version"] = __version__
    if extra:
        meta["extra"] = extra
    buf = io.BytesIO()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({"metadata": meta, "groups": _group_index(model), "state": state}, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)
    return path


def read_archive(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER or not raw.startswith(MAGIC):
        raise ChecksumError(f"{path}: not a checkpoint archive or truncated header")
    (version,) = struct.unpack("<H", raw[len(MAGIC):len(MAGIC) + 2])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest = raw[len(MAGIC) + 2:_HEADER]
    payload = raw[_HEADER:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (corrupted or truncated)")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)


def _rebuild_backbone(meta: dict) -> Backbone:
    bb = load_backbone(meta["architecture"], "random")
    inflate_input_channels(bb, meta["input_channels"], meta.get("inflation_policy") or "zero")
    if not meta["has_head"]:
        bb.remove_head()
    bb.weights_source = meta.get("weights_source", "random")
    return bb


def _restore_freeze(bb: Backbone, meta: dict) -> None:
    bb.set_frozen(meta.get("frozen_groups", []))
    bb.freeze_policy = meta.get("freeze_policy")


def checkpoint_load(
    path: str | Path,
    *,
    architecture: str | None = None,
    input_channels: int | None = None,
) -> nn.Module:
    """Restore a model saved by :func:`checkpoint_save`.

    ``architecture`` (``"alexnet"``, ``"resnet18"`` or ``"ensemble"``) and
    ``input_channels`` are optional expectations checked against the stored
    metadata.
    """
    archive = read_archive(path)
    meta = archive["metadata"]
    kind = meta.get("kind")
    stored_arch = "ensemble" if kind == "ensemble" else meta.get("architecture")
    if architecture is not None and architecture != stored_arch:
        raise CheckpointVersionError(f"{path}: holds {stored_arch}, expected {architecture}")
    if input_channels is not None and input_channels != meta.get("input_channels"):
        raise ShapeError(f"{path}: stored input_channels {meta.get('input_channels')} != {input_channels}")

    if kind == "backbone":
        model: nn.Module = _rebuild_backbone(meta)
    elif kind == "ensemble":
        a = _rebuild_backbone(meta["extractor_a"])
        b = _rebuild_backbone(meta["extractor_b"])
        head = nn.Linear(a.feature_dim + b.feature_dim, 2)
        model = EnsembleModel(a, b, head)
    else:
        raise CheckpointVersionError(f"{path}: unknown checkpoint kind {kind!r}")
    try:
        model.load_state_dict(archive["state"], strict=True)
    except RuntimeError as exc:
        raise ShapeError(f"{path}: state does not fit the described architecture: {exc}") from None

    if kind == "backbone":
        _restore_freeze(model, meta)
    else:
        _restore_freeze(model.extractor_a, meta["extractor_a"])
        _restore_freeze(model.extractor_b, meta["extractor_b"])
    model.eval()
    return model
