"""
Iterative magnitude pruning: CE vs logit pairing
================================================

Train one reference on 8-class blobs, prune it to ~59% sparsity in four
20% steps, and fine-tune once with CE alone and once with CE + MSE logit
pairing.  Count how many eval points change their prediction.
"""

from pathlib import Path

from aligncompress.harness import load_config, make_dataset, run_cell, train_reference
from aligncompress.harness.experiment import compare_reports, format_ratio

config = load_config(Path(__file__).resolve().parent.parent / "configs" / "blobs.json")
data = make_dataset(config.dataset)

reference, log = train_reference(config, seed=0, dataset=data)
print(f"reference eval accuracy {log[-1]['eval_accuracy']:.4f}")

reports = {}
for terms in (("CE",), ("CE", "MSE")):
    net, report, steps = run_cell(config, reference, data, terms, "uniform", seed=0)
    reports[terms] = report
    for row in steps:
        print(f"  {'+'.join(terms):7s} step {row['step']} sparsity {row['sparsity']:.3f} "
              f"acc {row['accuracy']:.4f} CIEs {row['cie_count']}")

a, b = reports[("CE",)], reports[("CE", "MSE")]
print(f"CIE   CE {a.cie_count:4d}   CE+MSE {b.cie_count:4d}")
print(f"CIE-U CE {a.cie_u_count:4d}   CE+MSE {b.cie_u_count:4d}")
delta = compare_reports(a, b)
print("CIE ratio (CE / CE+MSE):", format_ratio(delta["cie_ratio"]))
print(f"saliency IoU  CE {a.mean_iou:.4f}   CE+MSE {b.mean_iou:.4f}")
