"""Line-delimited JSON manifest of paired B-mode / elastography images.

One record per image pair::

    {"patient_id": "208", "label": "B", "image_id": "208_1",
     "bmode_path": "img/208_1_b.png", "elasto_path": "img/208_1_se.png",
     "roi": "120,80,200,180", "histological_type": "Lipoma", "strain_ratio": 0.81}

Relative paths resolve against the manifest's directory. Patient metadata is
repeated on every row and must agree between rows of the same patient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from PIL import Image

from ..core import Label
from ..errors import (
    DuplicateIdError,
    EmptyManifestError,
    ManifestError,
    ManifestNotFoundError,
    MissingLabelError,
    RoiError,
    UnresolvablePathError,
)


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    w: int
    h: int

    @classmethod
    def parse(cls, value: "str | Iterable[int] | Roi") -> "Roi":
        if isinstance(value, Roi):
            return value
        if isinstance(value, str):
            parts = [p for p in value.replace(" ", "").split(",") if p]
        else:
            parts = list(value)
        if len(parts) != 4:
            raise RoiError(f"roi must have 4 components x,y,w,h, got {value!r}")
        return cls(*(int(p) for p in parts))

    def fits(self, height: int, width: int) -> bool:
        return (
            self.x >= 0 and self.y >= 0 and self.w > 0 and self.h > 0
            and self.x + self.w <= width and self.y + self.h <= height
        )

    def __str__(self) -> str:
        return f"{self.x},{self.y},{self.w},{self.h}"


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    label: Label
    histological_type: str | None = None
    strain_ratio: float | None = None


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    patient_id: str
    bmode_path: Path
    elasto_path: Path
    roi: Roi | None = None


@dataclass
class DatasetManifest:
    patients: dict[str, PatientRecord]
    images: list[ImageRecord]
    source: Path | None = None
    _by_patient: dict[str, list[ImageRecord]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._by_patient = {}
        for rec in self.images:
            self._by_patient.setdefault(rec.patient_id, []).append(rec)

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_images(self) -> int:
        return len(self.images)

    # every row is one pair, so the per-modality counts coincide
    n_bmode = n_images
    n_elasto = n_images

    def images_of(self, patient_id: str) -> list[ImageRecord]:
        return list(self._by_patient.get(patient_id, []))

    def label_of(self, patient_id: str) -> Label:
        return self.patients[patient_id].label

    def image(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def patient_ids(self, label: Label | None = None) -> list[str]:
        ids = sorted(self.patients)
        if label is None:
            return ids
        return [p for p in ids if self.patients[p].label == label]

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        w, h = im.size
    return h, w


def parse_manifest(path: str | Path, *, check_roi: bool = True) -> DatasetManifest:
    """Read and validate a manifest file.

    Every referenced image must exist. When ``check_roi`` is set the image
    headers are read so that each ROI can be checked against both image sizes.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    root = path.parent

    patients: dict[str, PatientRecord] = {}
    images: list[ImageRecord] = []
    seen_images: set[str] = set()

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record: {exc}") from None
            for key in ("patient_id", "image_id", "bmode_path", "elasto_path"):
                if not row.get(key):
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            if row.get("label") in (None, ""):
                raise MissingLabelError(f"{path}:{lineno}: label missing")
            try:
                label = Label.parse(row["label"])
            except ValueError as exc:
                raise MissingLabelError(f"{path}:{lineno}: {exc}") from None

            pid = str(row["patient_id"])
            iid = str(row["image_id"])
            if iid in seen_images:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate image_id {iid!r}")
            seen_images.add(iid)

            sr = row.get("strain_ratio")
            if sr is not None:
                sr = float(sr)
                if sr < 0:
                    raise ManifestError(f"{path}:{lineno}: negative strain_ratio")
            patient = PatientRecord(pid, label, row.get("histological_type"), sr)
            prev = patients.get(pid)
            if prev is None:
                patients[pid] = patient
            elif prev != patient:
                raise DuplicateIdError(
                    f"{path}:{lineno}: patient_id {pid!r} repeated with conflicting metadata"
                )

            bpath = (root / row["bmode_path"]).resolve()
            epath = (root / row["elasto_path"]).resolve()
            for p in (bpath, epath):
                if not p.is_file():
                    raise UnresolvablePathError(f"{path}:{lineno}: cannot resolve {p}")

            roi = Roi.parse(row["roi"]) if row.get("roi") else None
            if roi is not None and check_roi:
                for p in (bpath, epath):
                    h, w = _image_size(p)
                    if not roi.fits(h, w):
                        raise RoiError(f"{path}:{lineno}: roi {roi} outside {w}x{h} image {p.name}")
            images.append(ImageRecord(iid, pid, bpath, epath, roi))

    if not images:
        raise EmptyManifestError("empty manifest")
    return DatasetManifest(patients, images, source=path)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``manifest`` as JSON lines, with image paths relative to ``path``."""
    path = Path(path)
    root = path.parent.resolve()
    with path.open("w", encoding="utf-8") as fh:
        for rec in manifest.images:
            pat = manifest.patients[rec.patient_id]
            row = {
                "patient_id": rec.patient_id,
                "label": pat.label.code,
                "image_id": rec.image_id,
                "bmode_path": _relative(rec.bmode_path, root),
                "elasto_path": _relative(rec.elasto_path, root),
            }
            if rec.roi is not None:
                row["roi"] = str(rec.roi)
            if pat.histological_type is not None:
                row["histological_type"] = pat.histological_type
            if pat.strain_ratio is not None:
                row["strain_ratio"] = pat.strain_ratio
            fh.write(json.dumps(row) + "\n")
    return path


def _relative(p: Path, root: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return str(p)
