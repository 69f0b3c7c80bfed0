"""Reverse-mode differentiation over a fixed set of layer primitives.

Tensors are plain ``float64`` numpy arrays.  A forward pass through a network
records one :class:`TapeRecord` per primitive; :func:`backward` walks the tape
in reverse, writes parameter gradients (masked) and returns the gradient with
respect to the network input, which saliency maps need.

Supported primitives: ``dense``, ``conv2d`` (3x3, stride 1, zero padding 1),
``relu``, ``flatten`` and ``group_adapter`` (an n x n matrix applied along
the channel axis, i.e. a 1x1 convolution without bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NumericOverflowError, ShapeError, TapeReuseError

DTYPE = np.float64


@dataclass(eq=False)
class Parameter:
    """A trainable array with its gradient, prune mask and momentum buffer.

    ``prunable`` marks weight matrices / kernels eligible for magnitude
    pruning.  ``lr_scale`` multiplies the optimizer learning rate for this
    parameter and ``decay`` toggles weight decay on it.
    """

    value: np.ndarray
    grad: np.ndarray | None = None
    mask: np.ndarray | None = None
    prunable: bool = False
    decay: bool = True
    lr_scale: float = 1.0
    velocity: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.mask is None:
            self.mask = np.ones_like(self.value)
        else:
            self.mask = np.ascontiguousarray(self.mask, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.mask.shape != self.value.shape:
            raise ShapeError(f"mask shape {self.mask.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def apply_mask(self):
        self.value *= self.mask

    def copy(self) -> "Parameter":
        return Parameter(
            value=self.value.copy(),
            grad=self.grad.copy(),
            mask=self.mask.copy(),
            prunable=self.prunable,
            decay=self.decay,
            lr_scale=self.lr_scale,
            velocity=None if self.velocity is None else self.velocity.copy(),
        )


@dataclass
class TapeRecord:
    op: str
    layer: int
    input_node: int
    output_node: int
    params: dict[str, Parameter]
    saved: dict[str, Any]


@dataclass
class Tape:
    records: list[TapeRecord] = field(default_factory=list)
    output_shape: tuple = ()
    consumed: bool = False


# --------------------------------------------------------------------------
# primitive kernels: forward(x, params, spec) -> (y, saved)
#                    backward(g, params, saved) -> (dx, {name: dparam})


def _dense_forward(x, params, spec):
    w, b = params["weight"].value, params["bias"].value
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects [batch, {w.shape[1]}], got {list(x.shape)}")
    return x @ w.T + b, {"x": x}


def _dense_backward(g, params, saved):
    x = saved["x"]
    w = params["weight"].value
    return g @ w, {"weight": g.T @ x, "bias": g.sum(axis=0)}


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # [n, c, h, w, 3, 3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv_forward(x, params, spec):
    w, b = params["weight"].value, params["bias"].value
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects [batch, {w.shape[1]}, H, W], got {list(x.shape)}")
    n, _, h, wd = x.shape
    cols = _im2col(x)
    y = cols @ w.reshape(w.shape[0], -1).T + b
    y = y.reshape(n, h, wd, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), {"cols": cols, "xshape": x.shape}


def _conv_backward(g, params, saved):
    w = params["weight"].value
    n, c, h, wd = saved["xshape"]
    cout = w.shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (g2.T @ saved["cols"]).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(cout, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], {"weight": dw, "bias": db}


def _relu_forward(x, params, spec):
    return np.maximum(x, 0.0), {"pos": x > 0}


def _relu_backward(g, params, saved):
    return g * saved["pos"], {}


def _flatten_forward(x, params, spec):
    return x.reshape(x.shape[0], -1), {"xshape": x.shape}


def _flatten_backward(g, params, saved):
    return g.reshape(saved["xshape"]), {}


def _adapter_forward(x, params, spec):
    a = params["A"].value
    if x.ndim < 2 or x.shape[1] != a.shape[0]:
        raise ShapeError(f"group adapter expects {a.shape[0]} channels, got {list(x.shape)}")
    if x.ndim == 2:
        return x @ a, {"x": x}
    return np.einsum("nihw,ij->njhw", x, a, optimize=True), {"x": x}


def _adapter_backward(g, params, saved):
    x = saved["x"]
    a = params["A"].value
    if x.ndim == 2:
        return g @ a.T, {"A": x.T @ g}
    da = np.einsum("nihw,njhw->ij", x, g, optimize=True)
    return np.einsum("njhw,ij->nihw", g, a, optimize=True), {"A": da}


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "dense": (_dense_forward, _dense_backward),
    "conv2d": (_conv_forward, _conv_backward),
    "relu": (_relu_forward, _relu_backward),
    "flatten": (_flatten_forward, _flatten_backward),
    "group_adapter": (_adapter_forward, _adapter_backward),
}


def forward(net, batch_inputs, record: bool = True):
    """Run ``net`` on a batch; return ``(logits, tape)``.

    The tape is ``None`` when ``record`` is false (inference only).
    """
    x = np.asarray(batch_inputs, dtype=DTYPE)
    expected = tuple(net.input_shape)
    if x.shape[1:] != expected:
        raise ShapeError(f"expected input [batch, {', '.join(map(str, expected))}], "
                         f"got {list(x.shape)}", layer="input")
    tape = Tape() if record else None
    for k, spec in enumerate(net.layers):
        fwd, _ = PRIMITIVES[spec.kind]
        params = net.layer_params(k)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                y, saved = fwd(x, params, spec)
        except ShapeError as exc:
            raise ShapeError(str(exc), layer=f"{k} ({spec.kind})") from None
        if not np.all(np.isfinite(y)):
            raise NumericOverflowError("non-finite activation", layer=f"{k} ({spec.kind})")
        if record:
            tape.records.append(TapeRecord(spec.kind, k, k, k + 1, params, saved))
        x = y
    if record:
        tape.output_shape = x.shape
    return x, tape


def backward(tape: Tape, loss_grad, param_grads: bool = True) -> np.ndarray:
    """Back-propagate ``loss_grad`` (d loss / d logits) through ``tape``.

    Overwrites ``Parameter.grad`` of every parameter on the tape (masked)
    unless ``param_grads`` is false, and returns d loss / d input.
    """
    if tape.consumed:
        raise TapeReuseError("tape has already been replayed")
    g = np.asarray(loss_grad, dtype=DTYPE)
    if g.shape != tuple(tape.output_shape):
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {tape.output_shape}")
    tape.consumed = True
    for rec in reversed(tape.records):
        _, bwd = PRIMITIVES[rec.op]
        g, dparams = bwd(g, rec.params, rec.saved)
        if param_grads:
            for name, d in dparams.items():
                p = rec.params[name]
                p.grad = d * p.mask
    return g


def log_softmax_t(logits, T: float = 1.0, axis: int = 1) -> np.ndarray:
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=DTYPE) / T
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_t(logits, T: float = 1.0, axis: int = 1) -> np.ndarray:
    """Temperature softmax over the class axis, max-subtracted."""
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=DTYPE) / T
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sgd_step(net, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """Classical momentum SGD with L2 decay; pruned entries stay exactly zero.

    ``v <- momentum * v + (grad + weight_decay * w)``, ``w <- w - lr * v``.
    """
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    for p in net.params.values():
        d = p.grad * p.mask
        if weight_decay and p.decay:
            d = d + weight_decay * p.value
        if momentum:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.value)
            p.velocity = momentum * p.velocity + d
            d = p.velocity
        p.value -= (lr * p.lr_scale) * d
        p.apply_mask()
        if p.velocity is not None:
            p.velocity *= p.mask


def grad_check(net, batch_inputs, loss_fn, *, step: float = 1e-4, n_samples: int | None = None,
               include_input: bool = True, rng=None) -> float:
    """Max relative error between autodiff and central finite differences.

    ``loss_fn(logits) -> (value, grad_wrt_logits)``.  Coordinates are sampled
    per tensor when ``n_samples`` is given; masked coordinates are skipped.
    """
    x = np.array(batch_inputs, dtype=DTYPE)
    logits, tape = forward(net, x)
    _, g = loss_fn(logits)
    dx = backward(tape, g)
    rng = np.random.default_rng(0) if rng is None else rng

    def loss_at():
        return loss_fn(forward(net, x, record=False)[0])[0]

    targets = [(p.value, p.grad, p.mask) for p in net.params.values()]
    if include_input:
        targets.append((x, dx, np.ones_like(x)))

    worst = 0.0
    for arr, ad, mask in targets:
        flat, adf, mf = arr.reshape(-1), ad.reshape(-1), mask.reshape(-1)
        idx = np.flatnonzero(mf)
        if n_samples is not None and idx.size > n_samples:
            idx = rng.choice(idx, size=n_samples, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            up = loss_at()
            flat[i] = old - step
            down = loss_at()
            flat[i] = old
            fd = (up - down) / (2 * step)
            err = abs(adf[i] - fd) / max(1e-8, abs(adf[i]) + abs(fd))
            worst = max(worst, err)
    return worst
