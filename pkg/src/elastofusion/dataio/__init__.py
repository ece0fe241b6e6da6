from .images import (
    ImagePair,
    StackedSample,
    augment,
    crop_lesion,
    load_pair,
    normalize,
    prepare_sample,
    resize_pair,
    stack_modalities,
)
from .manifest import DatasetManifest, ImageRecord, PatientRecord, Roi, parse_manifest, write_manifest
from .splits import SplitPlan, split_patients
from .synthetic import SignalChannels, SynthConfig, generate_synthetic

__all__ = [
    "DatasetManifest", "ImagePair", "ImageRecord", "PatientRecord", "Roi", "SignalChannels",
    "SplitPlan", "StackedSample", "SynthConfig", "augment", "crop_lesion", "generate_synthetic",
    "load_pair", "normalize", "parse_manifest", "prepare_sample", "resize_pair",
    "split_patients", "stack_modalities", "write_manifest",
]
