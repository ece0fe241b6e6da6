"""
Patient-wise voting and PPV comparison
======================================

Image-level predictions are turned into one diagnosis per patient. Two models
are then compared on the probability they assign to the true class.
"""

import numpy as np

from elastofusion.core import Label
from elastofusion.metrics import (
    Prediction,
    compute_metrics,
    confusion,
    patient_recognition_rate,
    patient_votes,
    welch_ttest,
)

rng = np.random.default_rng(0)

# a toy fold: 12 patients with 2 to 5 images each
preds = []
for i in range(12):
    label = Label(i % 2)
    for k in range(int(rng.integers(2, 6))):
        p_true = rng.beta(5, 2)  # mostly confident, sometimes wrong
        p_mal = p_true if label is Label.MALIGNANT else 1 - p_true
        preds.append(Prediction(f"P{i:02d}_{k}", f"P{i:02d}", label, 1 - p_mal, p_mal))

# a patient is benign only on a strict benign majority; ties go to malignant
votes = patient_votes(preds)
for v in votes[:4]:
    print(v.patient_id, v.true_label.name, f"{v.n_benign}/{v.n_images} benign ->", v.predicted.name)

image_m = compute_metrics(confusion([p.predicted for p in preds], [p.true_label for p in preds]))
patient_m = compute_metrics(confusion([v.predicted for v in votes], [v.true_label for v in votes]))
print("image accuracy  ", round(image_m.accuracy, 3))
print("patient accuracy", round(patient_m.accuracy, 3))

# mean over patients of the fraction of their images classified correctly
rate = patient_recognition_rate((v.n_correct, v.n_images) for v in votes)
print("recognition rate", round(rate, 3))

# a second, slightly less confident model on the same images
ppv_a = np.array([p.ppv for p in preds])
ppv_b = np.clip(ppv_a - rng.normal(0.08, 0.1, ppv_a.size), 0, 1)
res = welch_ttest(ppv_a, ppv_b)
print(f"Welch t = {res.t:.3f}, df = {res.df:.1f}, p = {res.p:.4f}, significant: {res.significant}")
