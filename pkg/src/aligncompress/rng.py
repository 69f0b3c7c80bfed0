"""Seedable, portable random streams.

Every stream is a Philox (counter-based) generator keyed by the experiment
seed and a purpose name, so that e.g. the data-shuffling stream of a run never
perturbs its weight-initialisation stream.
"""

import zlib

import numpy as np

INIT = "init"
DATA = "data"
LOSS_CHOICE = "loss-choice"


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Return the generator for ``purpose`` under experiment ``seed``."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,))
    return np.random.Generator(np.random.Philox(ss))
