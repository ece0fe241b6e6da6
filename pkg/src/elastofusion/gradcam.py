"""Grad-CAM for single backbones and for the feature-fusion ensemble.

For one extractor the map is ``ReLU(sum_k w_k A_k)`` with ``w_k`` the spatial
mean of ``d score / d A_k`` over the last convolutional activations ``A``.
For the ensemble, the weighted maps of both extractors are brought onto the
ResNet-side grid (AlexNet's 13x13 is bilinearly resized to 7x7 at 224 input),
summed, and only then rectified.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .core import CLASS_NAMES, INPUT_SIDE, Modality
from .dataio.images import StackedSample, normalize, resize_array
from .errors import ModelError, ShapeError


@dataclass
class Heatmap:
    grid: np.ndarray  # upsampled map, max-normalised to [0, 1]
    raw: np.ndarray  # rectified map on the feature grid, before upsampling and normalisation
    source_size: tuple[int, int]
    target_class: int
    normalized: bool = True

    @property
    def peak(self) -> tuple[int, int]:
        """(row, col) of the maximum of the upsampled map."""
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.grid), self.grid.shape))


def weighted_map(activations: torch.Tensor, gradients: torch.Tensor) -> torch.Tensor:
    """``sum_k mean(grad_k) * A_k`` for one sample (``K x H x W`` inputs), not rectified."""
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ShapeError("activations and gradients must both be K x H x W")
    weights = gradients.mean(dim=(1, 2))
    return torch.einsum("k,khw->hw", weights, activations)


def _resize_grid(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.interpolate(m[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]


def _finish(combined: torch.Tensor, out_size: int, target: int) -> Heatmap:
    raw = torch.relu(combined).detach()
    up = torch.relu(_resize_grid(raw, (out_size, out_size)))
    peak = float(up.max())
    grid = (up / peak) if peak > 0 else up
    return Heatmap(grid.numpy().astype(np.float64), raw.numpy().astype(np.float64),
                   tuple(raw.shape[-2:]), int(target))


@contextmanager
def _capture(layers: dict[str, nn.Module]):
    store: dict[str, torch.Tensor] = {}
    handles = [
        layer.register_forward_hook(lambda _m, _i, out, key=key: store.__setitem__(key, out))
        for key, layer in layers.items()
    ]
    try:
        yield store
    finally:
        for h in handles:
            h.remove()


def _as_batch(sample: StackedSample | torch.Tensor) -> torch.Tensor:
    if isinstance(sample, StackedSample):
        x = torch.from_numpy(normalize(sample.tensor, sample.modality).astype(np.float32))
    else:
        x = torch.as_tensor(sample, dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"Grad-CAM works on one sample at a time, got shape {tuple(x.shape)}")
    return x.clone().requires_grad_(True)


def _target(logits: torch.Tensor, target_class: int | None) -> int:
    n = logits.shape[1]
    if target_class is None:
        return int(logits[0].argmax())
    if not 0 <= int(target_class) < n:
        raise ValueError(f"target class {target_class} out of range for {n} classes")
    return int(target_class)


def gradcam_single(
    model: nn.Module,
    sample: StackedSample | torch.Tensor,
    target_class: int | None = None,
    *,
    layer: nn.Module | None = None,
    grid: tuple[int, int] | None = None,
    out_size: int = INPUT_SIDE,
) -> Heatmap:
    """Grad-CAM of ``model`` at ``layer`` (default: the backbone's last conv block).

    ``grid`` optionally resizes the weighted map to a given feature grid before
    rectification, which is how the ensemble combines extractors.
    """
    layer = layer if layer is not None else getattr(model, "cam_layer", None)
    if layer is None:
        raise ModelError("model exposes no convolutional layer for Grad-CAM")
    x = _as_batch(sample)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad(), _capture({"a": layer}) as acts:
            logits = model(x)
            target = _target(logits, target_class)
            if "a" not in acts or acts["a"].ndim != 4:
                raise ModelError("Grad-CAM layer did not produce 4-D activations")
            (grad,) = torch.autograd.grad(logits[0, target], acts["a"], allow_unused=True)
    finally:
        model.train(was_training)
    act = acts["a"][0].detach()
    grad = torch.zeros_like(act) if grad is None else grad[0]
    m = weighted_map(act, grad)
    if grid is not None:
        m = _resize_grid(m, grid)
    return _finish(m, out_size, target)


def gradcam_ensemble(
    ensemble: nn.Module,
    sample: StackedSample | torch.Tensor,
    target_class: int | None = None,
    *,
    out_size: int = INPUT_SIDE,
) -> Heatmap:
    ext_a, ext_b = ensemble.extractor_a, ensemble.extractor_b
    layers = {}
    for key, ext in (("a", ext_a), ("b", ext_b)):
        layer = getattr(ext, "cam_layer", None)
        if layer is None:
            raise ModelError(f"extractor {key} exposes no convolutional activations")
        layers[key] = layer
    x = _as_batch(sample)
    was_training = ensemble.training
    ensemble.eval()
    try:
        with torch.enable_grad(), _capture(layers) as acts:
            logits = ensemble(x)
            target = _target(logits, target_class)
            grads = torch.autograd.grad(logits[0, target], [acts["a"], acts["b"]], allow_unused=True)
    finally:
        ensemble.train(was_training)
    maps = {}
    for key, g in zip(("a", "b"), grads):
        act = acts[key][0].detach()
        maps[key] = weighted_map(act, torch.zeros_like(act) if g is None else g[0])
    target_grid = tuple(maps["b"].shape)
    combined = _resize_grid(maps["a"], target_grid) + maps["b"]
    return _finish(combined, out_size, target)


# -- rendering ------------------------------------------------------------------------------

def display_image(sample: StackedSample) -> np.ndarray:
    """``H x W x 3`` image in [0, 1] to draw a heatmap over: B-mode plane, or the elastogram for SE."""
    t = sample.tensor
    if sample.modality is Modality.SE:
        return t.transpose(1, 2, 0)
    return np.repeat(t[0][..., None], 3, axis=2)


def blend(heatmap: np.ndarray, image: np.ndarray, colormap: str = "jet", alpha: float = 0.4) -> np.ndarray:
    """Per-pixel blend ``(1 - alpha*h) * image + alpha*h * cmap(h)``; returns floats in [0, 1]."""
    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[:2] != h.shape:
        img = resize_array(img.transpose(2, 0, 1).astype(np.float32), *h.shape).transpose(1, 2, 0)
        if img.shape[:2] != h.shape:
            raise ShapeError("image and heatmap sizes differ")
    colors = matplotlib.colormaps[colormap](h)[..., :3]
    w = alpha * h[..., None]
    return np.clip((1.0 - w) * img + w * colors, 0.0, 1.0)


def overlay(
    heatmap: Heatmap | np.ndarray,
    image: np.ndarray,
    path: str | Path,
    colormap: str = "jet",
    alpha: float = 0.4,
) -> Path:
    grid = heatmap.grid if isinstance(heatmap, Heatmap) else heatmap
    out = blend(grid, image, colormap, alpha)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(out * 255.0).astype(np.uint8), mode="RGB").save(path)
    return path


def overlay_name(image_id: str, modality: Modality | str, target_class: int) -> str:
    return f"{image_id}_{Modality.parse(modality).value}_{CLASS_NAMES[target_class]}.png"


def export_heatmap(heatmap: Heatmap, path: str | Path) -> Path:
    path = Path(path)
    np.save(path, heatmap.grid.astype(np.float32))
    return path
