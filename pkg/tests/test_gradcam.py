import matplotlib
import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from elastofusion.backbones import build_classifier
from elastofusion.core import Modality
from elastofusion.dataio.images import StackedSample
from elastofusion.ensemble import build_ensemble, strip_classifier
from elastofusion.errors import ModelError, ShapeError
from elastofusion.gradcam import (
    blend,
    display_image,
    export_heatmap,
    gradcam_ensemble,
    gradcam_single,
    overlay,
    overlay_name,
    weighted_map,
)


class Toy(nn.Module):
    """1x1 conv to two channels, then a linear head over the flattened 3x3 grid."""

    def __init__(self, head_weight):
        super().__init__()
        self.conv = nn.Conv2d(1, 2, 1, bias=False)
        with torch.no_grad():
            self.conv.weight.copy_(torch.tensor([1.0, -2.0]).view(2, 1, 1, 1))
        self.head = nn.Linear(18, 2, bias=False)
        with torch.no_grad():
            self.head.weight.copy_(head_weight)
        self.cam_layer = self.conv

    def forward(self, x):
        return self.head(self.conv(x).flatten(1))


def test_weighted_map_small_case():
    acts = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert torch.equal(weighted_map(acts, torch.ones_like(acts)), acts[0])
    assert torch.equal(weighted_map(acts, torch.full_like(acts, -0.5)), -0.5 * acts[0])
    with pytest.raises(ShapeError):
        weighted_map(acts, torch.ones(1, 2, 3))


def test_toy_network_hand_derived():
    x = torch.arange(9, dtype=torch.float32).view(1, 1, 3, 3) / 4 - 1
    v = torch.linspace(-1, 1, 36).view(2, 18)
    h = gradcam_single(Toy(v), x, target_class=1, out_size=3)
    # d logit_1 / d A_k(i, j) is the head weight at that position
    a = np.stack([x[0, 0].numpy(), -2 * x[0, 0].numpy()])
    w = v[1].numpy().reshape(2, 3, 3).mean(axis=(1, 2))
    expected = np.maximum(np.einsum("k,khw->hw", w, a), 0)
    assert np.allclose(h.raw, expected, atol=1e-6)
    assert h.grid.max() == pytest.approx(1.0)
    assert np.allclose(h.grid, expected / expected.max(), atol=1e-6)
    assert h.source_size == (3, 3) and h.target_class == 1


def test_zero_gradient_gives_zero_map():
    h = gradcam_single(Toy(torch.zeros(2, 18)), torch.randn(1, 1, 3, 3), target_class=0)
    assert not h.grid.any() and not h.raw.any()


def test_scale_equivariance_and_nonnegativity():
    v = torch.randn(2, 18, generator=torch.Generator().manual_seed(0))
    x = torch.randn(1, 1, 3, 3, generator=torch.Generator().manual_seed(1))
    a = gradcam_single(Toy(v), x, target_class=0)
    b = gradcam_single(Toy(3.5 * v), x, target_class=0)
    assert np.allclose(a.grid, b.grid, atol=1e-6)
    assert a.grid.min() >= 0 and a.grid.shape == (224, 224)


def test_target_class_validation():
    with pytest.raises(ValueError):
        gradcam_single(Toy(torch.ones(2, 18)), torch.randn(1, 1, 3, 3), target_class=2)
    with pytest.raises(ModelError):
        gradcam_single(nn.Linear(2, 2), torch.randn(1, 2))


class _Member(nn.Module):
    """One extractor followed by its slice of the ensemble head."""

    def __init__(self, ext, weight, bias):
        super().__init__()
        self.ext, self.cam_layer = ext, ext.cam_layer
        self.weight, self.bias = weight, bias

    def forward(self, x):
        return self.ext.features(x) @ self.weight.T + self.bias


@pytest.fixture(scope="module")
def ensemble():
    a = strip_classifier(build_classifier("alexnet", 4, weights="random", seed=1))
    b = strip_classifier(build_classifier("resnet18", 4, weights="random", seed=2))
    return build_ensemble(a, b, seed=3)


def test_ensemble_map_on_resnet_grid(ensemble):
    x = torch.randn(1, 4, 224, 224, generator=torch.Generator().manual_seed(4))
    h = gradcam_ensemble(ensemble, x)
    assert h.source_size == (7, 7) and h.grid.shape == (224, 224)
    assert h.grid.min() >= 0


@pytest.mark.parametrize("dead", ["b", "a"])
def test_disconnected_extractor(ensemble, dead):
    x = torch.randn(1, 4, 224, 224, generator=torch.Generator().manual_seed(5))
    w, bias = ensemble.head.weight.detach().clone(), ensemble.head.bias.detach().clone()
    try:
        with torch.no_grad():
            if dead == "b":
                ensemble.head.weight[:, 4096:] = 0
            else:
                ensemble.head.weight[:, :4096] = 0
        live = ensemble.head.weight.detach().clone()
        h = gradcam_ensemble(ensemble, x, target_class=1)
        if dead == "b":
            ref = gradcam_single(_Member(ensemble.extractor_a, live[:, :4096], bias), x, 1, grid=(7, 7))
        else:
            ref = gradcam_single(_Member(ensemble.extractor_b, live[:, 4096:], bias), x, 1)
    finally:
        with torch.no_grad():
            ensemble.head.weight.copy_(w)
    assert np.allclose(h.raw, ref.raw, atol=1e-5)
    assert np.allclose(h.grid, ref.grid, atol=1e-5)


def test_blend_limits():
    img = np.full((4, 4, 3), 0.5)
    assert np.allclose(blend(np.zeros((4, 4)), img), img)
    full = blend(np.ones((4, 4)), img, alpha=0.4)
    jet_top = np.array(matplotlib.colormaps["jet"](1.0)[:3])
    assert np.allclose(full, 0.6 * img + 0.4 * jet_top)


def test_overlay_png(tmp_path):
    h = np.array([[0.0, 1.0], [0.5, 0.25]])
    img = np.array([[0.2, 0.4], [0.6, 0.8]])
    path = overlay(h, img, tmp_path / "o.png")
    got = np.asarray(Image.open(path))
    jet = matplotlib.colormaps["jet"](h)[..., :3]
    w = 0.4 * h[..., None]
    expected = np.round(np.clip((1 - w) * img[..., None] + w * jet, 0, 1) * 255).astype(np.uint8)
    assert got.shape == (2, 2, 3) and np.array_equal(got, expected)
    assert np.array_equal(got[0, 0], np.round(np.full(3, 0.2) * 255).astype(np.uint8))


def test_display_and_naming(tmp_path):
    t = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
    se = StackedSample(t, 0, "P1", "P1_0", Modality.SE)
    assert np.array_equal(display_image(se), t.transpose(1, 2, 0))
    four = StackedSample(np.concatenate([t[:1], t]), 0, "P1", "P1_0", Modality.BSE)
    assert np.array_equal(display_image(four)[..., 2], t[0])
    assert overlay_name("P1_0", "bse", 1) == "P1_0_bse_malignant.png"
    assert overlay_name("P1_0", Modality.B, 0) == "P1_0_b_benign.png"
    h = gradcam_single(Toy(torch.ones(2, 18)), torch.ones(1, 1, 3, 3), 0)
    saved = np.load(export_heatmap(h, tmp_path / "h.npy"))
    assert saved.shape == (224, 224)
