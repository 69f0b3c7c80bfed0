"""
A small grid sweep
==================

Runs every cell of ``configs/quick.json`` for three seeds and prints the
seed-aggregated CIE medians.  The same run from the shell:

    aligncompress sweep --config configs/quick.json --seeds 3 --out out
"""

from pathlib import Path
import tempfile

from aligncompress.harness import load_config, read_csv, run_experiment

config = load_config(Path(__file__).resolve().parent.parent / "configs" / "quick.json")
with tempfile.TemporaryDirectory() as tmp:
    results = run_experiment(config, tmp, seeds=(0, 1, 2))
    print(len(results), "cells,", sum(r.error is not None for r in results), "failed")
    for row in read_csv(Path(tmp) / config.name / "aggregate.csv"):
        print(f"{row['cell']:18s} CIE median {row['cie_count_median']:5.1f} "
              f"[{row['cie_count_min']:g}, {row['cie_count_max']:g}]  "
              f"IoU median {row['mean_iou_median']:.4f}")
