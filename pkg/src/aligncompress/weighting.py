"""Weights for combining loss terms.

Schemes: ``uniform``, ``learnable`` (softmax over raw logits trained by SGD
with a strong L2 decay), ``softadapt`` (softmax of normalised windowed loss
changes), and the one-hot baselines ``round_robin`` and ``random``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError

UNIFORM = "uniform"
LEARNABLE = "learnable"
SOFTADAPT = "softadapt"
ROUND_ROBIN = "round_robin"
RANDOM = "random"
SCHEMES = (UNIFORM, LEARNABLE, SOFTADAPT, ROUND_ROBIN, RANDOM)


def _softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()


def uniform_weights(active_terms) -> dict:
    terms = tuple(active_terms)
    if not terms:
        raise ConfigurationError("no active loss terms")
    if len(terms) > 3:
        raise ConfigurationError(f"at most 3 simultaneously weighted terms, got {terms}")
    return {t: 1.0 / len(terms) for t in terms}


def softadapt_weights(deltas, eta: float = 1.0, eps: float = 1e-8) -> np.ndarray:
    """Softmax of ``eta * s / (sum(s) + eps)`` for loss changes ``s``.

    The normaliser is the plain (signed) sum.  An all-zero change vector maps
    to all-zero scores, hence uniform weights.
    """
    s = np.asarray(deltas, dtype=np.float64)
    if not np.any(s):
        scores = np.zeros_like(s)
    else:
        scores = s / (s.sum() + eps)
    return _softmax(eta * scores)


@dataclass
class WeightingState:
    """Per-run weighting memory.

    Call :meth:`current` before a step to get the weights and :meth:`observe`
    with the step's unweighted term values afterwards.
    """

    scheme: str
    terms: tuple
    eta: float | None = None
    eps: float = 1e-8
    update_period: int = 10
    lr: float = 0.1
    seed: int = 0
    step: int = 0
    raw: np.ndarray | None = None
    window: list = field(default_factory=list)
    prev_window_mean: np.ndarray | None = None
    weights: dict = field(default_factory=dict)
    _rng: np.random.Generator | None = None

    def __post_init__(self):
        self.terms = tuple(self.terms)
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown weighting scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.terms:
            raise ConfigurationError("no active loss terms")
        if self.update_period < 1:
            raise ConfigurationError("update_period must be >= 1")
        if self.eta is None:
            self.eta = 1.0
        if self.raw is None:
            self.raw = np.zeros(len(self.terms))
        self._rng = rngmod.stream(self.seed, rngmod.LOSS_CHOICE)
        if self.scheme in (UNIFORM, SOFTADAPT):
            self.weights = uniform_weights(self.terms)
        elif self.scheme == LEARNABLE:
            self.weights = self._from_vector(_softmax(self.raw))
        else:
            self.weights = {}

    def _from_vector(self, w) -> dict:
        return {t: float(x) for t, x in zip(self.terms, w)}

    def _one_hot(self, i) -> dict:
        return {t: float(j == i) for j, t in enumerate(self.terms)}

    def current(self) -> dict:
        """Weights for the upcoming optimization step."""
        if self.scheme == ROUND_ROBIN:
            self.weights = round_robin_weights(self)
        elif self.scheme == RANDOM:
            self.weights = random_weights(self)
        return dict(self.weights)

    def observe(self, term_values: dict, lr: float | None = None):
        """Record one completed optimization step."""
        if self.scheme == LEARNABLE:
            learnable_update(self, term_values, lr)
        elif self.scheme == SOFTADAPT:
            softadapt_update(self, term_values)
        self.step += 1


def learnable_update(state: WeightingState, term_values: dict, lr: float | None = None) -> dict:
    """One SGD step on the raw weight logits.

    The combined loss ``L = sum_k w_k L_k`` with ``w = softmax(raw)`` gives
    ``dL/draw_j = w_j (L_j - L)``; decay adds ``2 * eta * raw``.
    """
    lr = state.lr if lr is None else lr
    values = np.array([term_values[t] for t in state.terms], dtype=np.float64)
    w = _softmax(state.raw)
    grad = w * (values - w @ values) + 2.0 * state.eta * state.raw
    state.raw = state.raw - lr * grad
    state.weights = state._from_vector(_softmax(state.raw))
    return dict(state.weights)


def softadapt_update(state: WeightingState, term_values: dict) -> dict:
    """Accumulate term values; every ``update_period`` steps re-weight.

    The change is the mean over the window just completed minus the mean over
    the window before it.  Weights stay uniform until two windows exist.
    """
    state.window.append([term_values[t] for t in state.terms])
    if len(state.window) < state.update_period:
        return dict(state.weights)
    mean = np.mean(np.array(state.window), axis=0)
    state.window = []
    if state.prev_window_mean is not None:
        deltas = mean - state.prev_window_mean
        state.weights = state._from_vector(softadapt_weights(deltas, state.eta, state.eps))
    state.prev_window_mean = mean
    return dict(state.weights)


def round_robin_weights(state: WeightingState) -> dict:
    return state._one_hot(state.step % len(state.terms))


def random_weights(state: WeightingState) -> dict:
    return state._one_hot(int(state._rng.integers(len(state.terms))))


@dataclass(frozen=True)
class WeightingConfig:
    scheme: str = UNIFORM
    eta: float = 1.0
    eps: float = 1e-8
    update_period: int = 10

    def make_state(self, terms, lr: float = 0.1, seed: int = 0) -> WeightingState:
        return WeightingState(self.scheme, tuple(terms), eta=self.eta, eps=self.eps,
                              update_period=self.update_period, lr=lr, seed=seed)
