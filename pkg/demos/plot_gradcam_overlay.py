"""
Grad-CAM on a single backbone and on the fused model
====================================================

Heatmaps come from the last convolutional block. For the ensemble the AlexNet
map is resized onto the ResNet-18 grid and the two are summed before
rectification.
"""

import tempfile
from pathlib import Path

import torch

from elastofusion.backbones import build_classifier
from elastofusion.dataio import SynthConfig, generate_synthetic, prepare_sample
from elastofusion.ensemble import build_ensemble, strip_classifier
from elastofusion.gradcam import display_image, gradcam_ensemble, gradcam_single, overlay, overlay_name

torch.manual_seed(0)
work = Path(tempfile.mkdtemp(prefix="elastofusion_cam_"))
manifest = generate_synthetic(SynthConfig(n_patients=2, images_per_patient=(1, 1), seed=4), work / "data")
record = manifest.images[0]
sample = prepare_sample(manifest, record, "bse")

# untrained networks still give a valid map; trained ones concentrate it on the lesion
resnet = build_classifier("resnet18", 4, weights="random", seed=1)
heat = gradcam_single(resnet, sample)
print("resnet18 grid", heat.source_size, "peak at", heat.peak)

alex = build_classifier("alexnet", 4, weights="random", seed=2)
fused = build_ensemble(strip_classifier(alex), strip_classifier(resnet), seed=3)
heat = gradcam_ensemble(fused, sample)
print("ensemble grid", heat.source_size, "peak at", heat.peak)
print("lesion box", record.roi)

path = overlay(heat, display_image(sample), work / overlay_name(record.image_id, "bse", heat.target_class))
print("overlay written to", path)
