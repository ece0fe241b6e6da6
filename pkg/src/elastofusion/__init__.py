"""Dual-modality (B-mode + strain elastography) ensemble transfer learning."""

from .core import CLASS_NAMES, Label, Modality

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "Label", "Modality", "__version__"]
