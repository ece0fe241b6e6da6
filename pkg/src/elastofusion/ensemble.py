"""Feature-fusion ensemble of two fine-tuned backbones, plus the soft-voting baseline."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbones import Backbone, NUM_CLASSES
from .core import INPUT_SIDE, Label
from .errors import ModelError, ShapeError


def strip_classifier(model: Backbone) -> Backbone:
    """Remove the classification head in place; the model then emits penultimate features."""
    if not isinstance(model, Backbone):
        raise TypeError("strip_classifier expects a Backbone")
    model.remove_head()
    return model


class EnsembleModel(nn.Module):
    """``softmax(head(concat(f_a(x), f_b(x))))`` with both extractors frozen."""

    def __init__(self, extractor_a: Backbone, extractor_b: Backbone, head: nn.Linear):
        super().__init__()
        self.extractor_a = extractor_a
        self.extractor_b = extractor_b
        self.head = head
        self.concat_order = (extractor_a.name, extractor_b.name)
        self.input_channels = extractor_a.input_channels

    @property
    def feature_dim(self) -> int:
        return self.extractor_a.feature_dim + self.extractor_b.feature_dim

    def train(self, mode: bool = True):
        super().train(mode)
        # extractor weights and normalisation statistics stay fixed
        self.extractor_a.eval()
        self.extractor_b.eval()
        return self

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.input_channels or tuple(x.shape[-2:]) != (INPUT_SIDE, INPUT_SIDE):
            raise ShapeError(
                f"ensemble expects N x {self.input_channels} x {INPUT_SIDE} x {INPUT_SIDE}, got {tuple(x.shape)}"
            )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.extractor_a.features(x), self.extractor_b.features(x)], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def metadata(self) -> dict:
        return {
            "kind": "ensemble",
            "concat_order": list(self.concat_order),
            "feature_dim": self.feature_dim,
            "input_channels": self.input_channels,
            "extractor_a": self.extractor_a.metadata(),
            "extractor_b": self.extractor_b.metadata(),
            "class_names": ["benign", "malignant"],
        }


def _freeze_all(backbone: Backbone) -> None:
    backbone.set_frozen(backbone.group_names)
    backbone.freeze_policy = "all_frozen"


def build_ensemble(
    ext_a: Backbone,
    ext_b: Backbone,
    seed: int = 0,
    *,
    verify_widths: bool = True,
) -> EnsembleModel:
    """Concatenate two stripped extractors and attach a freshly initialised linear head.

    ``verify_widths`` runs one dummy image through both extractors to confirm
    that their real output widths match the declared ``feature_dim``.
    """
    for ext in (ext_a, ext_b):
        if ext.has_head:
            raise ModelError(f"{ext.name} still has its classifier; strip it first")
    if ext_a.input_channels != ext_b.input_channels:
        raise ShapeError(
            f"extractors disagree on input channels: {ext_a.input_channels} vs {ext_b.input_channels}"
        )
    if verify_widths:
        probe = torch.zeros(1, ext_a.input_channels, INPUT_SIDE, INPUT_SIDE)
        with torch.no_grad():
            for ext in (ext_a, ext_b):
                was_training = ext.training
                ext.eval()
                width = ext.features(probe).shape[1]
                ext.train(was_training)
                if width != ext.feature_dim:
                    raise ShapeError(f"{ext.name} emits {width} features, declared {ext.feature_dim}")
    _freeze_all(ext_a)
    _freeze_all(ext_b)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = nn.Linear(ext_a.feature_dim + ext_b.feature_dim, NUM_CLASSES)
    model = EnsembleModel(ext_a, ext_b, head)
    model.eval()
    return model


def ensemble_forward(model: EnsembleModel, batch: torch.Tensor) -> torch.Tensor:
    model.check_input(batch)
    return torch.softmax(model(batch), dim=1)


def soft_vote(probs_a, probs_b, *, atol: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Average two probability matrices; argmax with exact ties going to malignant."""
    a = np.asarray(probs_a, dtype=np.float64)
    b = np.asarray(probs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"expected two N x 2 probability matrices, got {a.shape} and {b.shape}")
    for m in (a, b):
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > atol):
            raise ValueError("rows must be probability distributions")
    mean = (a + b) / 2.0
    preds = np.where(mean[:, Label.BENIGN] > mean[:, Label.MALIGNANT], Label.BENIGN, Label.MALIGNANT)
    return mean, preds.astype(np.int64)
