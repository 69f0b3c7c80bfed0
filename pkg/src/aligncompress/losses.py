"""Fine-tuning loss terms on student logits and their weighted combination.

Every term returns ``(value, grad)`` where ``grad`` is d value / d student
logits.  Teacher logits are constants.  Logits are ``[N, C]`` or per-pixel
``[N, C, H, W]``; in the per-pixel case every pixel counts as one example.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff
from .autodiff import DTYPE, log_softmax_t, softmax_t
from .errors import ConfigurationError, DomainError

CE = "CE"
MSE = "MSE"
CE_PRED = "CEPred"
KD = "KD"
TERMS = (CE, MSE, CE_PRED, KD)


def _as_rows(logits):
    """Flatten ``[N, C, ...]`` to ``[M, C]``; return the rows and an inverse."""
    z = np.asarray(logits, dtype=DTYPE)
    if z.ndim == 2:
        return z, lambda g: g
    moved = np.moveaxis(z, 1, -1)
    shape = moved.shape
    return moved.reshape(-1, shape[-1]), lambda g: np.moveaxis(g.reshape(shape), -1, 1)


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise DomainError(f"student/teacher logit shapes differ: {np.shape(a)} vs {np.shape(b)}")


def hard_labels(teacher_logits) -> np.ndarray:
    """Argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(np.asarray(teacher_logits), axis=1)


def ce_loss(student_logits, labels):
    rows, back = _as_rows(student_logits)
    m, c = rows.shape
    y = np.asarray(labels).reshape(-1)
    if y.size != m:
        raise DomainError(f"{y.size} labels for {m} logit rows")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    y = y.astype(np.intp)
    logp = log_softmax_t(rows, 1.0)
    value = -logp[np.arange(m), y].mean()
    g = np.exp(logp)
    g[np.arange(m), y] -= 1.0
    return max(float(value), 0.0), back(g / m)


def mse_pairing_loss(student_logits, teacher_logits):
    """Mean over examples of the squared L2 distance between logit vectors."""
    _check_same_shape(student_logits, teacher_logits)
    s, back = _as_rows(student_logits)
    t, _ = _as_rows(teacher_logits)
    diff = s - t
    m = s.shape[0]
    return float((diff * diff).sum() / m), back(2.0 * diff / m)


def ce_pred_loss(student_logits, teacher_logits):
    _check_same_shape(student_logits, teacher_logits)
    return ce_loss(student_logits, hard_labels(teacher_logits))


def kd_loss(student_logits, teacher_logits, T: float, symmetric: bool = False):
    """``mean KL(softmax(student) || softmax(teacher / T))``.

    With ``symmetric=True`` the student is softened by ``T`` too.  No ``T**2``
    rescaling is applied in either case.
    """
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    _check_same_shape(student_logits, teacher_logits)
    s, back = _as_rows(student_logits)
    t, _ = _as_rows(teacher_logits)
    ts = T if symmetric else 1.0
    logp = log_softmax_t(s, ts)
    logq = log_softmax_t(t, T)
    p = np.exp(logp)
    f = logp - logq
    kl = (p * f).sum(axis=1, keepdims=True)
    g = p * (f - kl) / ts
    m = s.shape[0]
    return max(float(kl.mean()), 0.0), back(g / m)


@dataclass(frozen=True)
class LossBundle:
    """Active subset of loss terms plus the KD temperature."""

    terms: tuple = (CE,)
    temperature: float = 1.0
    symmetric_kd: bool = False

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if not terms:
            raise ConfigurationError("at least one loss term must be active")
        unknown = [t for t in terms if t not in TERMS]
        if unknown:
            raise ConfigurationError(f"unknown loss terms {unknown}; choose from {TERMS}")
        if len(set(terms)) != len(terms):
            raise ConfigurationError(f"duplicate loss terms in {terms}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")

    @property
    def needs_teacher(self) -> bool:
        return any(t != CE for t in self.terms)

    def evaluate(self, student_logits, labels, teacher_logits=None) -> dict:
        """Per-term ``(value, grad)`` for every active term."""
        if self.needs_teacher and teacher_logits is None:
            raise ConfigurationError(f"terms {self.terms} need teacher logits")
        out = {}
        for term in self.terms:
            if term == CE:
                out[term] = ce_loss(student_logits, labels)
            elif term == MSE:
                out[term] = mse_pairing_loss(student_logits, teacher_logits)
            elif term == CE_PRED:
                out[term] = ce_pred_loss(student_logits, teacher_logits)
            else:
                out[term] = kd_loss(student_logits, teacher_logits, self.temperature,
                                    self.symmetric_kd)
        return out


@dataclass
class LossResult:
    value: float
    terms: dict
    grad: np.ndarray
    logits: np.ndarray
    tape: autodiff.Tape | None = None


def combine(terms: Mapping[str, tuple], weights: Mapping[str, float]):
    """Weighted sum of per-term ``(value, grad)`` pairs."""
    if set(weights) != set(terms):
        raise ConfigurationError(f"weights cover {sorted(weights)}, active terms are {sorted(terms)}")
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigurationError(f"loss weights sum to {total}, expected 1")
    value = 0.0
    grad = None
    for term, (v, g) in terms.items():
        w = weights[term]
        value += w * v
        grad = w * g if grad is None else grad + w * g
    return value, grad


def combined_loss(bundle: LossBundle, weights: Mapping[str, float], batch, student_net,
                  teacher_net=None, teacher_logits=None) -> LossResult:
    """Forward the student, evaluate every active term and combine them.

    ``batch`` is ``(inputs, labels)``.  Teacher logits are computed from
    ``teacher_net`` unless given.  Per-term values are reported unweighted.
    """
    inputs, labels = batch
    logits, tape = autodiff.forward(student_net, inputs)
    if teacher_logits is None and bundle.needs_teacher:
        if teacher_net is None:
            raise ConfigurationError(f"terms {bundle.terms} need a teacher network")
        teacher_logits = teacher_net(inputs)
    terms = bundle.evaluate(logits, labels, teacher_logits)
    value, grad = combine(terms, weights)
    return LossResult(value, {k: v for k, (v, _) in terms.items()}, grad, logits, tape)


def loss_fn(bundle: LossBundle, weights: Mapping[str, float], labels, teacher_logits=None):
    """Closure ``logits -> (value, grad)`` for :func:`autodiff.grad_check`."""

    def fn(logits):
        return combine(bundle.evaluate(logits, labels, teacher_logits), weights)

    return fn
