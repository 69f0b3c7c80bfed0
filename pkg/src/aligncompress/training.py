"""Mini-batch SGD training loop shared by reference training and fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff, rng as rngmod
from .errors import DivergenceError, DomainError, NumericOverflowError
from .losses import CE, LossBundle, combined_loss
from .weighting import WeightingConfig, WeightingState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    """SGD schedule; the learning rate is multiplied by ``lr_decay`` at each milestone epoch."""

    epochs: int = 50
    lr: float = 0.01
    milestones: tuple = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if not self.lr > 0:
            raise DomainError("lr must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)

    def rescaled(self, epochs: int) -> "TrainSchedule":
        """Same schedule stretched to ``epochs`` (milestones scale proportionally)."""
        if self.epochs == 0:
            return replace(self, epochs=epochs, milestones=())
        ms = tuple(int(round(m * epochs / self.epochs)) for m in self.milestones)
        return replace(self, epochs=epochs, milestones=ms)


def predict(net, inputs, batch_size: int = 512) -> np.ndarray:
    """Logits for ``inputs`` computed in chunks (no tape)."""
    chunks = [net(inputs[i:i + batch_size]) for i in range(0, len(inputs), batch_size)]
    return np.concatenate(chunks, axis=0)


def accuracy(net, inputs, labels) -> float:
    pred = np.argmax(predict(net, inputs), axis=1)
    return float(np.mean(pred == labels))


def fit(net, inputs, labels, schedule: TrainSchedule, *, bundle: LossBundle | None = None,
        weighting: WeightingState | WeightingConfig | None = None, teacher=None,
        gen: np.random.Generator | None = None, seed: int = 0,
        regularizer: Callable | None = None, on_epoch: Callable | None = None,
        step_offset: int = 0) -> list[dict]:
    """Train ``net`` in place; return one log row per epoch.

    ``regularizer(net) -> value`` may add its own gradient into
    ``Parameter.grad`` after back-propagation; its value is added to the
    logged loss.  ``on_epoch(epoch, row)`` may extend the row.
    """
    bundle = bundle or LossBundle((CE,))
    if weighting is None:
        weighting = WeightingConfig()
    if isinstance(weighting, WeightingConfig):
        weighting = weighting.make_state(bundle.terms, lr=schedule.lr, seed=seed)
    gen = rngmod.stream(seed, rngmod.DATA) if gen is None else gen
    n = len(inputs)
    rows = []
    step = step_offset
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = gen.permutation(n)
        totals: dict[str, float] = {}
        seen = 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            weights = weighting.current()
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    res = combined_loss(bundle, weights, (inputs[idx], labels[idx]), net, teacher)
            except NumericOverflowError:
                raise DivergenceError(step, float("nan")) from None
            if not np.isfinite(res.value):
                raise DivergenceError(step, res.value)
            autodiff.backward(res.tape, res.grad)
            value = res.value
            if regularizer is not None:
                value += regularizer(net)
            autodiff.sgd_step(net, lr, schedule.momentum, schedule.weight_decay)
            weighting.observe(res.terms, lr=lr)
            k = len(idx)
            seen += k
            totals["loss"] = totals.get("loss", 0.0) + value * k
            for t, v in res.terms.items():
                totals[t] = totals.get(t, 0.0) + v * k
            step += 1
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / max(seen, 1) for k, v in totals.items()})
        row.update({f"w_{t}": w for t, w in weighting.weights.items()})
        if on_epoch is not None:
            on_epoch(epoch, row)
        rows.append(row)
    return rows
