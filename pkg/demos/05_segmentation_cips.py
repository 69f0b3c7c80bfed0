"""
Segmentation: compression-impacted pixels and dice
==================================================

A small conv net segments bright ellipses.  After 8 pruning steps (~83%
sparsity) we count pixels whose prediction changed (CIPs) and dump saliency
maps of one image as PGM files.
"""

from pathlib import Path

from aligncompress.harness import load_config, make_dataset, run_cell, train_reference
from aligncompress.metrics import saliency_batch, write_pgm

config = load_config(Path(__file__).resolve().parent.parent / "configs" / "seg_blobs.json")
data = make_dataset(config.dataset)
reference, _ = train_reference(config, seed=0, dataset=data)

nets = {}
for terms in (("CE",), ("MSE",), ("CE", "MSE")):
    net, report, _ = run_cell(config, reference, data, terms, "uniform", seed=0)
    nets[terms] = net
    print(f"{'+'.join(terms):7s} CIP {report.cip_count:4d} (CIP-U {report.cip_u_count:4d})  "
          f"dice {report.dice_reference:.4f} -> {report.dice_compressed:.4f}  "
          f"sparsity {report.meta['sparsity']:.3f}")

out = Path("saliency_demo")
x = data.eval_inputs[:1]
write_pgm(saliency_batch(reference, x)[0], out / "reference.pgm")
for terms, net in nets.items():
    write_pgm(saliency_batch(net, x)[0], out / f"{'+'.join(terms)}.pgm")
write_pgm(x[0, 0] - x[0, 0].min(), out / "input.pgm")
print("saliency maps written to", out.resolve())
