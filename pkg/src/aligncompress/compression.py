"""Producing a compressed network from a trained reference.

Two methods are provided:

* iterative magnitude pruning with fine-tuning after every step
  (:func:`rewind_compress`), and
* group-sparsity adapters: an identity-initialised ``n x n`` matrix ``A``
  after a layer, trained with a column-wise group-lasso penalty, thresholded
  and folded back into the layer (:func:`group_sparsity_compress`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodiff import Parameter
from .errors import ConfigurationError, DegenerateModelError, DomainError
from .losses import LossBundle
from .models import GroupAdapter, Network
from .training import TrainSchedule, accuracy, fit, predict
from .weighting import WeightingConfig

log = logging.getLogger(__name__)

MAGNITUDE = "magnitude"
GROUP_SPARSITY = "group_sparsity"
PER_LAYER = "per_layer"
GLOBAL = "global"
GEOMETRIC = "geometric"
ADDITIVE = "additive"


@dataclass(frozen=True)
class CompressionPlan:
    """How to compress.

    ``schedule`` is ``geometric`` (each step prunes ``per_step_fraction`` of
    the surviving weights) or ``additive`` (target sparsity grows by
    ``per_step_fraction`` of all prunable weights per step).
    ``column_threshold`` is relative to the mean adapter column norm.
    """

    method: str = MAGNITUDE
    per_step_fraction: float = 0.2
    num_steps: int = 4
    finetune_epochs_per_step: int = 20
    scope: str = PER_LAYER
    schedule: str = GEOMETRIC
    lam: float = 2e-4
    lr_ratio: float = 0.01
    column_threshold: float = 1e-2
    adapter_layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "adapter_layers", tuple(self.adapter_layers))
        if self.method not in (MAGNITUDE, GROUP_SPARSITY):
            raise ConfigurationError(f"unknown compression method {self.method!r}")
        if not 0 < self.per_step_fraction < 1:
            raise DomainError("per_step_fraction must lie in (0, 1)")
        if self.num_steps < 0 or self.finetune_epochs_per_step < 0:
            raise DomainError("num_steps and finetune_epochs_per_step must be >= 0")
        if self.scope not in (PER_LAYER, GLOBAL):
            raise ConfigurationError(f"unknown pruning scope {self.scope!r}")
        if self.schedule not in (GEOMETRIC, ADDITIVE):
            raise ConfigurationError(f"unknown pruning schedule {self.schedule!r}")
        if self.schedule == ADDITIVE and self.num_steps * self.per_step_fraction > 1:
            raise DomainError("additive schedule would exceed 100% sparsity")
        if self.lam < 0 or self.lr_ratio <= 0 or self.column_threshold < 0:
            raise DomainError("lam, column_threshold must be >= 0 and lr_ratio > 0")

    def expected_sparsity(self, steps: int | None = None) -> float:
        k = self.num_steps if steps is None else steps
        if self.schedule == ADDITIVE:
            return k * self.per_step_fraction
        return 1.0 - (1.0 - self.per_step_fraction) ** k


# --------------------------------------------------------------------------
# magnitude pruning


def _prune_group(params: list[Parameter], count: int):
    """Zero the ``count`` smallest surviving magnitudes across ``params``.

    Ties go to the lower flat index (params concatenated in order).
    """
    if count <= 0:
        return
    values = np.concatenate([p.value.reshape(-1) for p in params])
    alive = np.flatnonzero(np.concatenate([p.mask.reshape(-1) for p in params]))
    order = np.argsort(np.abs(values[alive]), kind="stable")
    victims = alive[order[:count]]
    offset = 0
    for p in params:
        size = p.value.size
        local = victims[(victims >= offset) & (victims < offset + size)] - offset
        flat_mask = p.mask.reshape(-1)
        flat_mask[local] = 0.0
        p.apply_mask()
        if p.velocity is not None:
            p.velocity *= p.mask
        offset += size


def _groups(net: Network, scope: str) -> list[list[Parameter]]:
    prunable = list(net.prunable().values())
    return [[p] for p in prunable] if scope == PER_LAYER else [prunable]


def magnitude_prune(net: Network, fraction: float, scope: str = PER_LAYER) -> dict:
    """Prune ``floor(fraction * survivors)`` smallest-magnitude weights per group.

    Biases and adapters are never pruned.  Returns the masks by parameter name.
    """
    if not 0 < fraction < 1:
        raise DomainError(f"prune fraction must lie in (0, 1), got {fraction}")
    for group in _groups(net, scope):
        survivors = sum(int(np.count_nonzero(p.mask)) for p in group)
        _prune_group(group, math.floor(fraction * survivors))
    return {k: p.mask for k, p in net.prunable().items()}


def prune_to_sparsity(net: Network, target: float, scope: str = PER_LAYER) -> dict:
    """Prune each group until ``floor(target * size)`` of its weights are zeroed."""
    if not 0 <= target < 1:
        raise DomainError(f"target sparsity must lie in [0, 1), got {target}")
    for group in _groups(net, scope):
        size = sum(p.mask.size for p in group)
        pruned = size - sum(int(np.count_nonzero(p.mask)) for p in group)
        _prune_group(group, math.floor(target * size) - pruned)
    return {k: p.mask for k, p in net.prunable().items()}


def rewind_compress(reference: Network, plan: CompressionPlan, bundle: LossBundle,
                    weighting: WeightingConfig, schedule: TrainSchedule, train_data,
                    eval_data=None, seed: int = 0):
    """Iteratively prune and fine-tune a copy of ``reference``.

    Each step prunes, then fine-tunes for ``plan.finetune_epochs_per_step``
    epochs with the configured loss (the reference is the teacher).  Returns
    ``(compressed_net, step_logs)``; one log row per step with sparsity, the
    last epoch's loss terms, eval accuracy and CIE count against the reference.
    """
    if plan.method != MAGNITUDE:
        raise ConfigurationError("rewind_compress needs a magnitude plan")
    X, y = train_data
    net = reference.copy()
    net.reset_momentum()
    ft = schedule.rescaled(plan.finetune_epochs_per_step)
    state = weighting.make_state(bundle.terms, lr=ft.lr, seed=seed)
    gen = rngmod.stream(seed, rngmod.DATA + "/finetune")
    ref_eval_pred = None
    if eval_data is not None:
        ref_eval_pred = np.argmax(predict(reference, eval_data[0]), axis=1)
    logs = []
    for step in range(1, plan.num_steps + 1):
        if plan.schedule == GEOMETRIC:
            magnitude_prune(net, plan.per_step_fraction, plan.scope)
        else:
            prune_to_sparsity(net, plan.expected_sparsity(step), plan.scope)
        net.reset_momentum()
        rows = fit(net, X, y, ft, bundle=bundle, weighting=state, teacher=reference, gen=gen)
        row = {"step": step, "sparsity": net.sparsity()}
        if rows:
            row.update({k: v for k, v in rows[-1].items() if k not in ("epoch", "lr")})
        if eval_data is not None:
            pred = np.argmax(predict(net, eval_data[0]), axis=1)
            row["accuracy"] = float(np.mean(pred == eval_data[1]))
            row["cie_count"] = int(np.count_nonzero(pred != ref_eval_pred))
        log.debug("rewind step %d: %s", step, row)
        logs.append(row)
    return net, logs


# --------------------------------------------------------------------------
# group-sparsity adapters


def _renumber(net: Network, layers, index_map: dict, extra: dict | None = None) -> Network:
    params = {}
    for name, p in net.params.items():
        k, field = name.split(".", 1)
        if int(k) in index_map:
            params[f"{index_map[int(k)]}.{field}"] = p
    params.update(extra or {})
    return Network(layers, net.input_shape, net.num_classes, params)


def attach_group_adapter(net: Network, layer_index: int) -> Network:
    """Insert an identity ``GroupAdapter`` right after layer ``layer_index``."""
    if not 0 <= layer_index < len(net.layers):
        raise ConfigurationError(f"no layer {layer_index}")
    spec = net.layers[layer_index]
    if spec.kind not in ("dense", "conv2d"):
        raise ConfigurationError(f"cannot attach an adapter to a {spec.kind} layer")
    new = net.copy()
    layers = list(new.layers)
    layers.insert(layer_index + 1, GroupAdapter(spec.n_out))
    index_map = {k: (k if k <= layer_index else k + 1) for k in range(len(net.layers))}
    adapter = Parameter(np.eye(spec.n_out), decay=False)
    return _renumber(new, layers, index_map, {f"{layer_index + 1}.A": adapter})


def attach_group_adapters(net: Network, layer_indices) -> Network:
    """Attach adapters after several layers (indices refer to ``net``)."""
    out = net
    for shift, k in enumerate(sorted(layer_indices)):
        out = attach_group_adapter(out, k + shift)
    return out


def adapter_indices(net: Network) -> list[int]:
    return [k for k, s in enumerate(net.layers) if s.kind == "group_adapter"]


def group_sparsity_regularizer(A) -> tuple[float, np.ndarray]:
    """Sum of column L2 norms and its subgradient (0 on zero columns)."""
    A = np.asarray(A, dtype=np.float64)
    norms = np.sqrt((A * A).sum(axis=0))
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms > 0, A / safe, 0.0)
    return float(norms.sum()), grad


def prune_adapter_columns(net: Network, threshold: float) -> dict:
    """Zero adapter columns whose norm is below ``threshold * mean column norm``.

    Returns the pruned column indices per adapter layer.
    """
    out = {}
    for k in adapter_indices(net):
        p = net.params[f"{k}.A"]
        norms = np.sqrt((p.value ** 2).sum(axis=0))
        cut = np.flatnonzero(norms < threshold * norms.mean()) if threshold > 0 else np.array([], int)
        p.value[:, cut] = 0.0
        p.mask[:, cut] = 0.0
        out[k] = cut.tolist()
    return out


def _fold_one(net: Network, a: int, drop: bool):
    """Fold the adapter at layer ``a`` into layer ``a - 1``."""
    host = net.layers[a - 1]
    A = net.params[f"{a}.A"].value
    W = net.params[f"{a - 1}.weight"]
    b = net.params[f"{a - 1}.bias"]
    if host.kind == "dense":
        w_new = A.T @ W.value
    else:
        w_new = np.einsum("ij,icxy->jcxy", A, W.value)
    b_new = A.T @ b.value
    dead = np.flatnonzero(~np.any(A != 0, axis=0))
    if dead.size == A.shape[1]:
        raise DegenerateModelError(f"every column of adapter {a} was pruned")

    # channels can only be removed when a later parametrised layer consumes them
    # through element-wise layers (ReLU(0) == 0 keeps the fold exact)
    consumer = None
    for j in range(a + 1, len(net.layers)):
        kind = net.layers[j].kind
        if kind in ("dense", "conv2d"):
            consumer = j
            break
        if kind != "relu":
            break
    keep = np.arange(A.shape[1])
    if drop and consumer is not None and dead.size:
        keep = np.setdiff1d(keep, dead)

    layers = list(net.layers)
    layers[a - 1] = type(host)(host.kind, host.n_in, int(keep.size))
    extra = {
        f"{a - 1}.weight": Parameter(w_new[keep], prunable=W.prunable, decay=W.decay),
        f"{a - 1}.bias": Parameter(b_new[keep], prunable=b.prunable, decay=b.decay),
    }
    if consumer is not None and keep.size != A.shape[1]:
        cspec = net.layers[consumer]
        cw = net.params[f"{consumer}.weight"]
        extra[f"{consumer}.weight"] = Parameter(cw.value[:, keep], mask=cw.mask[:, keep],
                                                prunable=cw.prunable, decay=cw.decay)
        layers[consumer] = type(cspec)(cspec.kind, int(keep.size), cspec.n_out)
    del layers[a]
    index_map = {k: (k if k < a else k - 1) for k in range(len(net.layers)) if k != a}
    params = {}
    for name, p in net.params.items():
        k, field = name.split(".", 1)
        k = int(k)
        if k == a:
            continue
        key = f"{k}.{field}"
        params[f"{index_map[k]}.{field}"] = extra.pop(key, p)
    folded = Network(layers, net.input_shape, net.num_classes, params)
    return folded, int(A.shape[1] - keep.size)


def fold_adapters(net: Network, drop: bool = True):
    """Replace every ``layer -> adapter`` pair by one layer with ``W' = A^T W``.

    Output channels whose adapter column is zero are removed (with the
    matching inputs of the next layer) when ``drop`` is set and a consuming
    layer exists.  Returns ``(folded_net, removed_channel_counts)``.
    """
    out = net.copy()
    removed = []
    while True:
        idx = adapter_indices(out)
        if not idx:
            return out, removed
        out, n = _fold_one(out, idx[0], drop)
        removed.append(n)


def group_sparsity_compress(net: Network, layer_indices, plan: CompressionPlan,
                            bundle: LossBundle, weighting: WeightingConfig,
                            schedule: TrainSchedule, train_data, teacher: Network | None = None,
                            seed: int = 0):
    """Train adapters with a group-lasso penalty, threshold columns and fold.

    ``layer_indices`` name the layers of ``net`` that receive adapters (empty
    means ``net`` already carries them).  ``teacher`` defaults to ``net``
    itself.  Returns ``(folded_net, info)``.
    """
    teacher = net if teacher is None else teacher
    adapted = attach_group_adapters(net, layer_indices) if layer_indices else net.copy()
    if not adapter_indices(adapted):
        raise ConfigurationError("no group adapters to train")
    adapted.reset_momentum()
    for k in adapter_indices(adapted):
        p = adapted.params[f"{k}.A"]
        p.lr_scale = plan.lr_ratio
        p.decay = False

    def regularizer(model):
        total = 0.0
        for k in adapter_indices(model):
            p = model.params[f"{k}.A"]
            value, grad = group_sparsity_regularizer(p.value)
            p.grad = p.grad + plan.lam * grad * p.mask
            total += plan.lam * value
        return total

    X, y = train_data
    ft = schedule.rescaled(plan.finetune_epochs_per_step)
    state = weighting.make_state(bundle.terms, lr=ft.lr, seed=seed)
    rows = fit(adapted, X, y, ft, bundle=bundle, weighting=state, teacher=teacher,
               gen=rngmod.stream(seed, rngmod.DATA + "/group"), regularizer=regularizer)
    pruned = prune_adapter_columns(adapted, plan.column_threshold)
    folded, removed = fold_adapters(adapted)
    info = {"log": rows, "pruned_columns": pruned, "removed_channels": removed,
            "adapter_net": adapted}
    return folded, info


def compress(reference: Network, plan: CompressionPlan, bundle: LossBundle,
             weighting: WeightingConfig, schedule: TrainSchedule, train_data,
             eval_data=None, seed: int = 0):
    """Dispatch on ``plan.method``; returns ``(net, logs)``."""
    if plan.method == MAGNITUDE:
        return rewind_compress(reference, plan, bundle, weighting, schedule, train_data,
                               eval_data, seed)
    layers = plan.adapter_layers or tuple(
        k for k, s in enumerate(reference.layers[:-1]) if s.kind in ("dense", "conv2d"))
    net, info = group_sparsity_compress(reference, layers, plan, bundle, weighting, schedule,
                                        train_data, teacher=reference, seed=seed)
    row = {"step": 1, "sparsity": net.sparsity(), "removed_channels": sum(info["removed_channels"])}
    if info["log"]:
        row.update({k: v for k, v in info["log"][-1].items() if k not in ("epoch", "lr")})
    if eval_data is not None:
        row["accuracy"] = accuracy(net, *eval_data)
        ref = np.argmax(predict(reference, eval_data[0]), axis=1)
        row["cie_count"] = int(np.count_nonzero(np.argmax(predict(net, eval_data[0]), 1) != ref))
    return net, [row]
