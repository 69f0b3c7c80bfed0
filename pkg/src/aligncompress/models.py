"""Small reference architectures, the ``Network`` container and checkpoints."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff, rng as rngmod
from .autodiff import DTYPE, Parameter
from .errors import (
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
    DomainError,
    ShapeError,
)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``kind`` is one of ``dense``, ``conv2d``, ``relu``, ``flatten``,
    ``group_adapter``.  ``n_in``/``n_out`` are features (dense), channels
    (conv2d) or the adapter width (both equal); they are 0 for shape-free
    layers.
    """

    kind: str
    n_in: int = 0
    n_out: int = 0


def Dense(n_in, n_out):
    return LayerSpec("dense", n_in, n_out)


def Conv2d(in_ch, out_ch):
    return LayerSpec("conv2d", in_ch, out_ch)


def ReLU():
    return LayerSpec("relu")


def Flatten():
    return LayerSpec("flatten")


def GroupAdapter(n):
    return LayerSpec("group_adapter", n, n)


_KIND_CODES = {"dense": 1, "conv2d": 2, "relu": 3, "flatten": 4, "group_adapter": 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _propagate_shape(spec: LayerSpec, shape: tuple, k: int) -> tuple:
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.n_in:
            raise ShapeError(f"dense({spec.n_in},{spec.n_out}) cannot take {shape}", layer=k)
        return (spec.n_out,)
    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.n_in:
            raise ShapeError(f"conv2d({spec.n_in},{spec.n_out}) cannot take {shape}", layer=k)
        return (spec.n_out,) + tuple(shape[1:])
    if spec.kind == "group_adapter":
        if len(shape) not in (1, 3) or shape[0] != spec.n_in:
            raise ShapeError(f"group_adapter({spec.n_in}) cannot take {shape}", layer=k)
        return tuple(shape)
    if spec.kind == "relu":
        return tuple(shape)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


class Network:
    """Sequential network: layer specs plus a keyed parameter store.

    Parameters are named ``"<layer index>.<weight|bias|A>"``.  Dense weights are
    stored ``[out, in]``; conv kernels ``[out, in, 3, 3]``.
    """

    def __init__(self, layers, input_shape, num_classes, params=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.params: dict[str, Parameter] = {} if params is None else dict(params)
        self.output_shape = self.validate()

    def validate(self) -> tuple:
        shape = self.input_shape
        for k, spec in enumerate(self.layers):
            shape = _propagate_shape(spec, shape, k)
        if shape[0] != self.num_classes:
            raise ShapeError(f"network emits {shape[0]} channels, expected {self.num_classes}")
        return shape

    def layer_params(self, k: int) -> dict[str, Parameter]:
        prefix = f"{k}."
        return {name[len(prefix):]: p for name, p in self.params.items() if name.startswith(prefix)}

    def init_params(self, seed: int = 0):
        """He-uniform weights, zero biases, identity adapters."""
        gen = rngmod.stream(seed, rngmod.INIT)
        self.params = {}
        for k, spec in enumerate(self.layers):
            if spec.kind == "dense":
                shape, fan_in = (spec.n_out, spec.n_in), spec.n_in
            elif spec.kind == "conv2d":
                shape, fan_in = (spec.n_out, spec.n_in, 3, 3), spec.n_in * 9
            elif spec.kind == "group_adapter":
                self.params[f"{k}.A"] = Parameter(np.eye(spec.n_in), decay=False)
                continue
            else:
                continue
            limit = np.sqrt(6.0 / fan_in)
            self.params[f"{k}.weight"] = Parameter(gen.uniform(-limit, limit, size=shape), prunable=True)
            self.params[f"{k}.bias"] = Parameter(np.zeros(spec.n_out))
        return self

    def __call__(self, x):
        return autodiff.forward(self, x, record=False)[0]

    def copy(self) -> "Network":
        return Network(self.layers, self.input_shape, self.num_classes,
                       {k: p.copy() for k, p in self.params.items()})

    @property
    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def prunable(self) -> dict[str, Parameter]:
        return {k: p for k, p in self.params.items() if p.prunable}

    def sparsity(self) -> float:
        ps = self.prunable().values()
        total = sum(p.mask.size for p in ps)
        if total == 0:
            return 0.0
        return sum(int(p.mask.size - np.count_nonzero(p.mask)) for p in ps) / total

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def reset_momentum(self):
        for p in self.params.values():
            p.velocity = None


def build_classifier(input_dim: int, hidden_dims, C: int, seed: int = 0) -> Network:
    """MLP ``[Dense -> ReLU] * k -> Dense`` with ``C`` outputs."""
    if C < 2:
        raise DomainError(f"need at least 2 classes, got {C}")
    dims = [input_dim, *hidden_dims]
    if any(d < 1 for d in dims):
        raise DomainError(f"all dimensions must be >= 1, got {dims}")
    layers = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers += [Dense(a, b), ReLU()]
    layers.append(Dense(dims[-1], C))
    return Network(layers, (input_dim,), C).init_params(seed)


def build_segmenter(in_ch: int, widths, C: int = 2, height: int = 16, width: int = 16,
                    seed: int = 0) -> Network:
    """Conv3x3/ReLU stack mapping ``[N, in_ch, H, W]`` to per-pixel logits ``[N, C, H, W]``."""
    widths = list(widths)
    if not widths:
        raise DomainError("segmenter needs at least one hidden width")
    layers = []
    chans = [in_ch, *widths]
    for a, b in zip(chans[:-1], chans[1:]):
        layers += [Conv2d(a, b), ReLU()]
    layers.append(Conv2d(chans[-1], C))
    return Network(layers, (in_ch, height, width), C).init_params(seed)


# --------------------------------------------------------------------------
# checkpoint container
#
#   "ACMP" | u32 version | u32 ndim | u32 dims... | u32 C | u32 nlayers
#   | (u8 kind, u32 n_in, u32 n_out)* | u32 nparams
#   | (u16 namelen, name, u8 flags, f64 lr_scale, u8 ndim, u32 dims..., f64 data..., packed mask)*
#   | u32 crc32 of everything above
# all little-endian.

MAGIC = b"ACMP"
VERSION = 1


def _encode(net: Network) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack(f"<I{len(net.input_shape)}I", len(net.input_shape), *net.input_shape))
    out.append(struct.pack("<II", net.num_classes, len(net.layers)))
    for spec in net.layers:
        out.append(struct.pack("<BII", _KIND_CODES[spec.kind], spec.n_in, spec.n_out))
    out.append(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        flags = int(p.prunable) | (int(p.decay) << 1)
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<BdB{p.value.ndim}I", flags, p.lr_scale, p.value.ndim, *p.value.shape))
        out.append(p.value.astype("<f8").tobytes())
        out.append(np.packbits(p.mask.reshape(-1).astype(np.uint8)).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode(buf: bytes) -> Network:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or corrupted file)")
    r = _Reader(body)
    r.take(8)
    (ndim,) = r.unpack("<I")
    input_shape = r.unpack(f"<{ndim}I")
    num_classes, nlayers = r.unpack("<II")
    layers = []
    for _ in range(nlayers):
        code, a, b = r.unpack("<BII")
        if code not in _CODE_KINDS:
            raise CorruptCheckpointError(f"unknown layer code {code}")
        layers.append(LayerSpec(_CODE_KINDS[code], a, b))
    (nparams,) = r.unpack("<I")
    params = {}
    for _ in range(nparams):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        flags, lr_scale, pdim = r.unpack("<BdB")
        shape = r.unpack(f"<{pdim}I")
        size = int(np.prod(shape)) if shape else 1
        value = np.frombuffer(r.take(8 * size), dtype="<f8").astype(DTYPE).reshape(shape)
        bits = np.frombuffer(r.take((size + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits)[:size].astype(DTYPE).reshape(shape)
        params[name] = Parameter(value, mask=mask, prunable=bool(flags & 1),
                                 decay=bool(flags & 2), lr_scale=lr_scale)
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes in checkpoint")
    try:
        return Network(layers, input_shape, num_classes, params)
    except ShapeError as exc:
        raise CorruptCheckpointError(f"inconsistent layer table: {exc}") from None


def checkpoint_bytes(net: Network) -> bytes:
    return _encode(net)


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode(net))
    return path


def load_checkpoint(path) -> Network:
    return _decode(Path(path).read_bytes())
