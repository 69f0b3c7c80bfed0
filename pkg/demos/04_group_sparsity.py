"""
Group-sparsity adapters and folding
===================================

An identity adapter is attached after each hidden layer, trained with a
column-wise group penalty, thresholded, and folded back.  The folded network
is smaller and computes the same function as the thresholded adapter net.
"""

import numpy as np

from aligncompress import CompressionPlan, LossBundle, TrainSchedule, build_classifier, fit
from aligncompress.compression import group_sparsity_compress
from aligncompress.harness import gen_blobs
from aligncompress.weighting import WeightingConfig

data = gen_blobs(4, 50, spread=0.3, seed=0)
reference = build_classifier(2, [32, 32], 4, seed=0)
fit(reference, *data.train, TrainSchedule(epochs=40, batch_size=16), seed=0)

# a deliberately strong penalty so that channels actually disappear at this scale
plan = CompressionPlan(method="group_sparsity", finetune_epochs_per_step=40, lam=0.05,
                       lr_ratio=1.0, column_threshold=0.3)
folded, info = group_sparsity_compress(reference, [0, 2], plan, LossBundle(("CE", "MSE")),
                                       WeightingConfig(), TrainSchedule(lr=0.005, batch_size=16),
                                       data.train)

print("hidden widths before:", [s.n_out for s in reference.layers if s.kind == "dense"][:-1])
print("hidden widths after: ", [s.n_out for s in folded.layers if s.kind == "dense"][:-1])
print("channels removed per adapter:", info["removed_channels"])
print("parameters:", reference.num_params, "->", folded.num_params)

x = data.eval_inputs
gap = np.abs(folded(x) - info["adapter_net"](x)).max()
print(f"max |folded - adapter net| on eval: {gap:.1e}")
acc = lambda net: float(np.mean(np.argmax(net(x), 1) == data.eval_labels))
print(f"eval accuracy {acc(reference):.4f} -> {acc(folded):.4f}")
