"""Deterministic synthetic breast-ultrasound phantoms.

Benign patients get smooth elliptical, mildly hypoechoic lesions that are soft
(red) on the elastogram; malignant patients get spiculated, markedly
hypoechoic lesions with posterior shadowing that are hard (blue). Under
``GRAY_ONLY`` / ``COLOR_ONLY`` the other modality's lesion appearance is drawn
independently of the label, so it carries no class information.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ..core import Label
from .manifest import DatasetManifest, ImageRecord, PatientRecord, Roi, write_manifest


class SignalChannels(str, enum.Enum):
    GRAY_ONLY = "gray"
    COLOR_ONLY = "color"
    BOTH = "both"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 40
    images_per_patient: tuple[int, int] = (3, 5)
    class_balance: float = 0.5  # fraction of malignant patients
    signal_channels: SignalChannels = SignalChannels.BOTH
    image_size: int = 224
    seed: int = 0
    roi_margin: float = 0.15

    def __post_init__(self) -> None:
        lo, hi = self.images_per_patient
        if self.n_patients < 1 or lo < 1 or hi < lo or self.image_size < 32:
            raise ValueError(f"invalid synthetic config: {self}")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must lie in (0, 1)")
        object.__setattr__(self, "signal_channels", SignalChannels(self.signal_channels))


@dataclass(frozen=True)
class _Lesion:
    cx: float
    cy: float
    radius: float
    aspect: float
    angle: float
    spiculated: bool
    hard: bool
    phase: float
    n_spikes: int


def _lesion_mask(les: _Lesion, size: int, jitter: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - (les.cx + jitter[0])
    dy = yy - (les.cy + jitter[1])
    c, s = np.cos(les.angle), np.sin(les.angle)
    u = c * dx + s * dy
    v = (-s * dx + c * dy) * les.aspect
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    if les.spiculated:
        spikes = np.abs(np.sin(0.5 * les.n_spikes * theta + les.phase)) ** 6
        lobes = 0.12 * np.sin(3 * theta + 2 * les.phase)
        boundary = les.radius * (0.8 + lobes + 0.55 * spikes)
    else:
        boundary = np.full_like(theta, les.radius)
    return rho <= boundary, rho / np.maximum(boundary, 1e-6)


def _stiffness_to_rgb(stiff: np.ndarray) -> np.ndarray:
    """Soft (0) -> red, intermediate -> green, hard (1) -> blue."""
    s = np.clip(stiff, 0.0, 1.0)
    r = np.clip(1.0 - 2.0 * s, 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * s - 1.0)
    b = np.clip(2.0 * s - 1.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def _render_bmode(les: _Lesion, size: int, rng: np.random.Generator, jitter) -> np.ndarray:
    base = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 3.0)
    base = 0.55 + 0.35 * base / (np.abs(base).max() + 1e-9)
    depth = np.linspace(1.05, 0.85, size)[:, None]
    img = base * depth
    mask, _ = _lesion_mask(les, size, jitter)
    soft_mask = ndimage.gaussian_filter(mask.astype(np.float64), 1.5 if les.spiculated else 2.5)
    level = 0.10 if les.spiculated else 0.38
    img = img * (1.0 - soft_mask) + level * soft_mask
    if les.spiculated:
        # posterior acoustic shadow below the lesion
        cols = mask.any(axis=0)
        rows = np.where(mask.any(axis=1))[0]
        if rows.size:
            bottom = rows.max()
            shadow = np.zeros_like(img)
            shadow[bottom:, cols] = 0.35
            img = img * (1.0 - ndimage.gaussian_filter(shadow, 4.0))
    speckle = rng.rayleigh(1.0, (size, size)) / np.sqrt(np.pi / 2.0)
    img = img * (0.75 + 0.25 * speckle)
    return np.clip(img, 0.0, 1.0)


def _render_elasto(les: _Lesion, size: int, rng: np.random.Generator, jitter) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 6.0)
    stiff = 0.5 + 0.12 * field / (np.abs(field).max() + 1e-9)
    mask, _ = _lesion_mask(les, size, jitter)
    halo = ndimage.gaussian_filter(mask.astype(np.float64), 4.0)
    target = 0.92 if les.hard else 0.08
    stiff = stiff * (1.0 - halo) + target * halo
    rgb = _stiffness_to_rgb(stiff)
    rgb = rgb + rng.normal(0.0, 0.04, rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def _roi_for(les: _Lesion, size: int, jitter: np.ndarray, margin: float) -> Roi:
    mask, _ = _lesion_mask(les, size, jitter)
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    my, mx = int(round(margin * (y1 - y0))), int(round(margin * (x1 - x0)))
    y0, x0 = max(0, y0 - my), max(0, x0 - mx)
    y1, x1 = min(size, y1 + my), min(size, x1 + mx)
    return Roi(int(x0), int(y0), int(x1 - x0), int(y1 - y0))


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_synthetic(config: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write phantom PNGs plus ``manifest.jsonl`` into ``out_dir``; return the manifest."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    size = config.image_size

    n_malignant = int(round(config.class_balance * config.n_patients))
    labels = [Label.BENIGN] * (config.n_patients - n_malignant) + [Label.MALIGNANT] * n_malignant
    order = np.random.default_rng([config.seed, 0]).permutation(config.n_patients)
    labels = [labels[i] for i in order]

    patients: dict[str, PatientRecord] = {}
    images: list[ImageRecord] = []
    lo, hi = config.images_per_patient
    for idx, label in enumerate(labels):
        rng = np.random.default_rng([config.seed, 1, idx])
        malignant = label is Label.MALIGNANT
        spiculated = hard = malignant
        if config.signal_channels is SignalChannels.GRAY_ONLY:
            hard = bool(rng.random() < 0.5)
        elif config.signal_channels is SignalChannels.COLOR_ONLY:
            spiculated = bool(rng.random() < 0.5)
        lesion = _Lesion(
            cx=rng.uniform(0.35, 0.65) * size,
            cy=rng.uniform(0.35, 0.6) * size,
            radius=rng.uniform(0.14, 0.2) * size,
            aspect=rng.uniform(1.0, 1.6),
            angle=rng.uniform(0.0, np.pi),
            spiculated=spiculated,
            hard=hard,
            phase=rng.uniform(0.0, 2 * np.pi),
            n_spikes=int(rng.integers(7, 12)),
        )
        pid = f"P{idx:03d}"
        strain = rng.uniform(3.5, 9.0) if hard else rng.uniform(0.5, 2.5)
        patients[pid] = PatientRecord(
            pid, label,
            histological_type="synthetic-spiculated" if spiculated else "synthetic-smooth",
            strain_ratio=round(float(strain), 2),
        )
        n_img = int(rng.integers(lo, hi + 1))
        for k in range(n_img):
            jitter = rng.normal(0.0, 0.03 * size, 2)
            # the uninformative attribute is redrawn per image so it carries no
            # patient-level correlation with the label either
            shown = stiff = lesion
            if config.signal_channels is SignalChannels.GRAY_ONLY:
                # smooth footprint too, or the halo outline would betray spiculation
                stiff = replace(lesion, hard=bool(rng.random() < 0.5), spiculated=False)
            elif config.signal_channels is SignalChannels.COLOR_ONLY:
                shown = replace(lesion, spiculated=bool(rng.random() < 0.5))
                stiff = shown
            gray = _render_bmode(shown, size, rng, jitter)
            color = _render_elasto(stiff, size, rng, jitter)
            iid = f"{pid}_{k}"
            bpath = img_dir / f"{iid}_b.png"
            epath = img_dir / f"{iid}_se.png"
            Image.fromarray(_to_uint8(gray), mode="L").save(bpath)
            Image.fromarray(_to_uint8(color), mode="RGB").save(epath)
            roi = _roi_for(shown, size, jitter, config.roi_margin)
            images.append(ImageRecord(iid, pid, bpath.resolve(), epath.resolve(), roi))

    manifest = DatasetManifest(patients, images)
    manifest.source = write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
