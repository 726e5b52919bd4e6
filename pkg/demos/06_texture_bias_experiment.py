"""Pocket version of the texture-bias experiment (the full one lives in
tests/test_acceptance.py as criterion 7).

Two identical models train on the same synthetic benchmark, one under the
blur curriculum and one on sharp images only; both are then evaluated on the
clean test set and on its texture-perturbed twin.  The headline number is the
specificity drop: how many non-malignant images flip to false positives once
malignant texture statistics are transplanted onto them.  Sizes here are
reduced so the demo finishes in about a minute; expect noisier numbers than
the acceptance run.
"""

import numpy as np

from msop.blocks import ClassifierConfig, MsopClassifier
from msop.curriculum import TrainConfig, run_training
from msop.data import SynthConfig, generate_synthetic, perturb_non_malignant
from msop.labels import LABELS, label_index
from msop.metrics import classification_metrics
from msop.pipeline import crop_region, resize_image

INPUT = 24


def crops(records):
    return [(resize_image(crop_region(r.image, r.boxes[0]), INPUT, INPUT),
             label_index(r.label)) for r in records]


def evaluate(model, records):
    preds = [LABELS[int(np.argmax(model.predict_probs(
        resize_image(crop_region(r.image, r.boxes[0]), INPUT, INPUT))))]
        for r in records]
    return classification_metrics(preds, [r.label for r in records])


train = generate_synthetic(SynthConfig(size=128, n_normal=40, n_benign=40,
                                       n_malignant=40, noise_level=4.0, seed=101))
test = generate_synthetic(SynthConfig(size=128, n_normal=12, n_benign=12,
                                      n_malignant=12, noise_level=4.0, seed=202))
perturbed = perturb_non_malignant(test, beta=0.1, seed=303)
samples = crops(train)

cfg = TrainConfig(epochs=25, batch_size=16, lr=0.02, momentum=0.9,
                  weight_decay=0.0005, sigma0=2, k=3, k_prime=5)

print(f"{'regime':6s} {'clean spec':>10s} {'pert spec':>10s} {'drop':>6s} "
      f"{'sens (both)':>12s}")
for regime in ("va", "none"):
    model = MsopClassifier(ClassifierConfig(
        input_height=INPUT, input_width=INPUT, stage_widths=(8, 16, 32),
        layers_per_stage=1, normalize_cov=True), seed=7)
    run_training(model, samples, regime, cfg, seed=909)
    clean = evaluate(model, test)
    pert = evaluate(model, perturbed)
    drop = clean.specificity - pert.specificity
    assert clean.sensitivity == pert.sensitivity  # malignant images untouched
    print(f"{regime:6s} {clean.specificity:10.1f} {pert.specificity:10.1f} "
          f"{drop:6.1f} {clean.sensitivity:12.1f}")

print("\nThe curriculum run should hold more of its specificity: blurred early")
print("epochs force the model onto wall geometry, so transplanted textures")
print("have less to grab onto.")
