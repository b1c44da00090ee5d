"""Walkthrough: the imbalanced-classification harness.

Builds a deliberately imbalanced two-class toy dataset (class signal =
number of bright blobs), then compares training protocols:

  (a) train on the imbalanced set as-is,
  (b) balance the minority class with traditional augmentations.

Run from the repo root:

    python3 demos/03_imbalanced_classification.py
"""

import torch

from roigen.classifier import ClassifierConfig, TrialPlan, class_weights, run_protocol
from roigen.volumes import make_synthetic_roi


def build_data(n_major=14, n_minor=5, n_test=10):
    train = [(make_synthetic_roi(s, 32, 1), 0) for s in range(n_major)]
    train += [(make_synthetic_roi(100 + s, 32, 6), 1) for s in range(n_minor)]
    test = [(make_synthetic_roi(200 + s, 32, 1), 0) for s in range(n_test // 2)]
    test += [(make_synthetic_roi(300 + s, 32, 6), 1) for s in range(n_test // 2)]
    return {"train": train, "test": test}


data = build_data()
labels = [l for _, l in data["train"]]
print(f"training set: {labels.count(0)} majority vs {labels.count(1)} minority")
print(f"class weights (as-stated formula): {class_weights(labels)}")
print(f"class weights (inverse mode):      {class_weights(labels, mode='inverse')}")

cfg = ClassifierConfig(preset="toy", epochs=8, batch_size=6)
for protocol, label in (("a", "imbalanced real"), ("b", "augment-balanced")):
    torch.manual_seed(0)
    plan = TrialPlan(protocol=protocol, trials=2, seed=0)
    result = run_protocol(plan, cfg, data)
    agg = result["aggregate"]
    print(f"\nprotocol ({protocol}) {label}:")
    for key in ("auc", "f1", "accuracy"):
        mean, sd = agg[key]
        print(f"  {key:>9s}: {mean:.3f} +/- {sd:.3f}")
