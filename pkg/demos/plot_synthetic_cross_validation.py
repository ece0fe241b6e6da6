"""
Cross-validating the fused model on a synthetic phantom set
===========================================================

A small phantom set is generated, split by patient, and the ensemble is
cross-validated on stacked B-mode plus elastography inputs. Settings are cut
down so the script finishes in a few minutes on one CPU core.
"""

import tempfile
from pathlib import Path

from elastofusion.dataio import SynthConfig, generate_synthetic, split_patients
from elastofusion.metrics import build_cv_report
from elastofusion.report import render_report
from elastofusion.training import TrainConfig, cross_validate

work = Path(tempfile.mkdtemp(prefix="elastofusion_demo_"))

# malignant phantoms are dark and spiculated on B-mode and hard (blue) on the elastogram
manifest = generate_synthetic(SynthConfig(n_patients=24, images_per_patient=(3, 4), image_size=96, seed=1),
                              work / "data")
print(manifest.n_patients, "patients,", manifest.n_images, "image pairs")

# every image of a patient lands in exactly one of test, train or validation
plan = split_patients(manifest, 0.25, n_folds=5, seed=1)
print("test patients:", sorted(plan.test_patients))

# no pretrained weights needed here: random init keeps the demo offline
config = TrainConfig(max_epochs=8, patience=8, augment=False, weights="random", modality="bse", seed=1)
result = cross_validate(manifest, plan, config, "ensemble", run_dir=work / "run", save_checkpoints=False)

# the ensemble run also carries its two members and their soft vote
reports = [build_cv_report(result.predictions(name), name, "bse", False) for name in result.available]
for r in reports:
    print(f"{r.model:9s} patient-wise accuracy {r.patient_wise['accuracy'].format()}")

for path in render_report(reports, work / "report"):
    print("wrote", path)
