"""Pixel-level operations on paired B-mode / elastography images."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from ..core import INPUT_SIDE, Label, Modality
from ..errors import ChannelCountError, ImageDecodeError, RoiError, SizeMismatchError
from .manifest import DatasetManifest, ImageRecord, Roi

# ImageNet statistics for the RGB slots; the gray plane reuses their mean.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
GRAY_MEAN = float(np.mean(IMAGENET_MEAN))
GRAY_STD = float(np.mean(IMAGENET_STD))

AUGMENT_UPSCALE = 256


@dataclass
class ImagePair:
    gray: np.ndarray  # H x W, float32 in [0, 1]
    color: np.ndarray  # H x W x 3, float32 in [0, 1]
    label: Label
    patient_id: str
    image_id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.gray.shape[:2]


@dataclass
class StackedSample:
    tensor: np.ndarray  # C x H x W, float32
    label: Label
    patient_id: str
    image_id: str
    modality: Modality


def _decode(path, mode_hint: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            bands = im.getbands()
            if mode_hint == "gray":
                if len(bands) == 1:
                    arr = np.asarray(im.convert("L"))
                else:
                    # collapse colour-encoded B-mode files to luminance
                    arr = np.asarray(im.convert("RGB").convert("L"))
            else:
                rgb_bands = [b for b in bands if b != "A"]
                if len(rgb_bands) != 3:
                    raise ChannelCountError(
                        f"{path}: elastography image must have 3 colour channels, got {len(rgb_bands)}"
                    )
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from None
    return arr.astype(np.float32) / 255.0


def load_pair(record: ImageRecord, label: Label) -> ImagePair:
    gray = _decode(record.bmode_path, "gray")
    color = _decode(record.elasto_path, "color")
    return ImagePair(gray, color, Label(label), record.patient_id, record.image_id)


def load_manifest_pair(manifest: DatasetManifest, record: ImageRecord) -> ImagePair:
    return load_pair(record, manifest.label_of(record.patient_id))


def crop_lesion(pair: ImagePair, roi: Roi) -> ImagePair:
    """Crop both modalities with the same rectangle."""
    roi = Roi.parse(roi)
    if roi.w <= 0 or roi.h <= 0:
        raise RoiError(f"roi {roi} has zero area")
    for arr in (pair.gray, pair.color):
        h, w = arr.shape[:2]
        if not roi.fits(h, w):
            raise RoiError(f"roi {roi} outside image of size {w}x{h}")
    ys = slice(roi.y, roi.y + roi.h)
    xs = slice(roi.x, roi.x + roi.w)
    return replace(pair, gray=pair.gray[ys, xs].copy(), color=pair.color[ys, xs].copy())


def resize_array(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a channel-first ``C x H x W`` array.

    Half-pixel sampling (``align_corners=False``); an antialiasing triangle
    filter is used when shrinking so downsized images do not alias.
    """
    if arr.shape[-2:] == (height, width):
        return arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return np.clip(out[0].numpy(), 0.0, 1.0)


def resize_pair(pair: ImagePair, side: int = INPUT_SIDE) -> ImagePair:
    if side < 1:
        raise ValueError("side must be >= 1")
    if pair.gray.size == 0 or pair.color.size == 0:
        raise ValueError("cannot resize an empty image")
    gray = resize_array(pair.gray[None], side, side)[0]
    color = resize_array(pair.color.transpose(2, 0, 1), side, side).transpose(1, 2, 0)
    return replace(pair, gray=np.ascontiguousarray(gray), color=np.ascontiguousarray(color))


def stack_modalities(pair: ImagePair, modality: Modality | str) -> StackedSample:
    """Stack into ``C x H x W``: BSE -> [gray, R, G, B], SE -> [R, G, B], B -> [g, g, g]."""
    modality = Modality.parse(modality)
    if pair.gray.shape[:2] != pair.color.shape[:2]:
        raise SizeMismatchError(
            f"gray {pair.gray.shape[:2]} and colour {pair.color.shape[:2]} differ in size"
        )
    rgb = pair.color.transpose(2, 0, 1)
    if modality is Modality.BSE:
        tensor = np.concatenate([pair.gray[None], rgb], axis=0)
    elif modality is Modality.SE:
        tensor = rgb
    else:
        tensor = np.repeat(pair.gray[None], 3, axis=0)
    return StackedSample(
        np.ascontiguousarray(tensor, dtype=np.float32),
        pair.label, pair.patient_id, pair.image_id, modality,
    )


def augment(
    sample: StackedSample,
    rng: np.random.Generator,
    *,
    flip: bool | None = None,
    upscale: int = AUGMENT_UPSCALE,
) -> StackedSample:
    """Upscale to ``upscale`` square, random-crop back to the input size, maybe flip.

    The same geometric transform is applied to every channel. ``flip`` forces
    the flip decision; by default it is drawn with probability 0.5.
    """
    c, h, w = sample.tensor.shape
    big = resize_array(sample.tensor, upscale, upscale)
    top = int(rng.integers(0, upscale - h + 1))
    left = int(rng.integers(0, upscale - w + 1))
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    out = big[:, top:top + h, left:left + w]
    if do_flip:
        out = out[:, :, ::-1]
    return replace(sample, tensor=np.ascontiguousarray(out))


def hflip(sample: StackedSample) -> StackedSample:
    return replace(sample, tensor=np.ascontiguousarray(sample.tensor[:, :, ::-1]))


def channel_stats(modality: Modality | str) -> tuple[np.ndarray, np.ndarray]:
    modality = Modality.parse(modality)
    mean, std = list(IMAGENET_MEAN), list(IMAGENET_STD)
    if modality is Modality.BSE:
        mean, std = [GRAY_MEAN] + mean, [GRAY_STD] + std
    return np.asarray(mean, np.float32), np.asarray(std, np.float32)


def normalize(tensor: np.ndarray, modality: Modality | str) -> np.ndarray:
    mean, std = channel_stats(modality)
    return (tensor - mean[:, None, None]) / std[:, None, None]


def denormalize(tensor: np.ndarray, modality: Modality | str) -> np.ndarray:
    mean, std = channel_stats(modality)
    return tensor * std[:, None, None] + mean[:, None, None]


def prepare_sample(
    manifest: DatasetManifest,
    record: ImageRecord,
    modality: Modality | str,
    *,
    crop: bool = False,
    side: int = INPUT_SIDE,
) -> StackedSample:
    """Load, optionally crop to the ROI, resize and stack one manifest row."""
    pair = load_manifest_pair(manifest, record)
    if crop:
        if record.roi is None:
            raise RoiError(f"image {record.image_id} has no roi but cropping was requested")
        pair = crop_lesion(pair, record.roi)
    pair = resize_pair(pair, side)
    return stack_modalities(pair, modality)
