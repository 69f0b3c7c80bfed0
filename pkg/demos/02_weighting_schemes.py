"""
How the loss weights move during fine-tuning
============================================

The same student is fine-tuned against a teacher with CE + MSE + CEPred under
each weighting scheme; the weights of the final step are printed.
"""

import numpy as np

from aligncompress import LossBundle, TrainSchedule, build_classifier, fit
from aligncompress.harness import gen_blobs
from aligncompress.weighting import SCHEMES, WeightingConfig
from aligncompress.losses import CE, CE_PRED, MSE

data = gen_blobs(4, 40, spread=0.3, seed=0)
teacher = build_classifier(2, [32], 4, seed=0)
fit(teacher, *data.train, TrainSchedule(epochs=30, batch_size=16), seed=0)

terms = (CE, MSE, CE_PRED)
for scheme in SCHEMES:
    student = build_classifier(2, [32], 4, seed=1)
    state = WeightingConfig(scheme, update_period=10).make_state(terms, lr=0.01, seed=0)
    rows = fit(student, *data.train, TrainSchedule(epochs=20, batch_size=16),
               bundle=LossBundle(terms), weighting=state, teacher=teacher, seed=0)
    w = np.array([rows[-1][f"w_{t}"] for t in terms])
    print(f"{scheme:12s} final weights {np.round(w, 3)}  loss {rows[-1]['loss']:.4f}")

# Learnable weights drift away from the largest loss; SoftAdapt favours the loss
# that rose most over the last window; the one-hot schemes pick a single term.
