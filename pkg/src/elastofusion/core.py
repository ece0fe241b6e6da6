"""Label and modality conventions used throughout the package."""

from __future__ import annotations

import enum


class Label(enum.IntEnum):
    """Class index convention: 0 = benign, 1 = malignant, everywhere."""

    BENIGN = 0
    MALIGNANT = 1

    @classmethod
    def parse(cls, value: "str | int | Label") -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper()
        if key in ("B", "BENIGN", "0"):
            return cls.BENIGN
        if key in ("M", "MALIGNANT", "1"):
            return cls.MALIGNANT
        raise ValueError(f"unrecognised label {value!r}")

    @property
    def code(self) -> str:
        return "B" if self is Label.BENIGN else "M"


class Modality(str, enum.Enum):
    B = "b"
    SE = "se"
    BSE = "bse"

    @property
    def channels(self) -> int:
        return 4 if self is Modality.BSE else 3

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        return cls(str(value).strip().lower())


CLASS_NAMES = ("benign", "malignant")
INPUT_SIDE = 224
