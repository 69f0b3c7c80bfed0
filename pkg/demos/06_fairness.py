"""
Class fairness after compression
================================

One class has a tenth of the training data.  Per-class error rates of the
reference and of the two compressed models show which classes pay for the
pruning.
"""

from pathlib import Path

import numpy as np

from aligncompress.harness import load_config, make_dataset, run_cell, train_reference

config = load_config(Path(__file__).resolve().parent.parent / "configs" / "blobs_imbalanced.json")
data = make_dataset(config.dataset)
print("training counts per class:", data.class_counts)

reference, _ = train_reference(config, seed=0, dataset=data)
reports = {t: run_cell(config, reference, data, t, "uniform", seed=0)[1]
           for t in (("CE",), ("CE", "MSE"))}

ref = reports[("CE",)]
print("class  ref err   CE err  CE+MSE err")
for c in range(data.num_classes):
    row = [ref.error_reference[c]] + [r.error_compressed[c] for r in reports.values()]
    print(f"{c:5d}  " + "  ".join(f"{v:7.3f}" for v in row))
print("max-min gap: reference {:.3f}, CE {:.3f}, CE+MSE {:.3f}".format(
    ref.gap_reference, *(r.gap_compressed for r in reports.values())))
print("largest accuracy drop (CE):", np.round(max(ref.accuracy_delta), 3))
