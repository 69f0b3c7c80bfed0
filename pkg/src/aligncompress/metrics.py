"""Misalignment metrics between a reference and a compressed network.

Prediction-level: CIE (examples the two models classify differently), CIE-U
(the subset where the reference was right) and their per-pixel analogue CIP.
Class-level: per-class error rates, the max-min gap and per-class accuracy
deltas.  Feature-level: input-gradient saliency maps compared by soft IoU.
Segmentation quality: dice.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff
from .errors import DomainError, MissingClassError
from .training import predict


@dataclass
class Predictions:
    """Ground truth plus reference and compressed predictions.

    Arrays share one shape: ``[N]`` for classification, ``[N, H, W]`` for
    per-pixel predictions.
    """

    labels: np.ndarray
    reference: np.ndarray
    compressed: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.reference = np.asarray(self.reference)
        self.compressed = np.asarray(self.compressed)
        if not (self.labels.shape == self.reference.shape == self.compressed.shape):
            raise DomainError(f"prediction shapes differ: {self.labels.shape}, "
                              f"{self.reference.shape}, {self.compressed.shape}")


def count_cies(records: Predictions):
    """``(count, sorted flat indices)`` where the two models disagree."""
    idx = np.flatnonzero(records.reference.reshape(-1) != records.compressed.reshape(-1))
    return int(idx.size), idx.tolist()


def count_cie_u(records: Predictions):
    """Disagreements on which the reference prediction was correct."""
    r = records.reference.reshape(-1)
    idx = np.flatnonzero((r == records.labels.reshape(-1)) & (records.compressed.reshape(-1) != r))
    return int(idx.size), idx.tolist()


@dataclass
class CipCounts:
    count: int
    per_image: list
    u_count: int
    u_per_image: list


def count_cips(records: Predictions) -> CipCounts:
    """Per-pixel disagreements for ``[N, H, W]`` predictions (plus the CIP-U variant)."""
    if records.reference.ndim != 3:
        raise DomainError(f"pixel predictions must be [N, H, W], got {records.reference.shape}")
    diff = records.reference != records.compressed
    u = diff & (records.reference == records.labels)
    per = diff.sum(axis=(1, 2))
    per_u = u.sum(axis=(1, 2))
    return CipCounts(int(per.sum()), per.tolist(), int(per_u.sum()), per_u.tolist())


@dataclass
class Fairness:
    error_reference: list
    error_compressed: list
    gap_reference: float
    gap_compressed: float
    accuracy_delta: list  # acc_ref - acc_comp per class; positive = compression hurt


def per_class_error(labels, pred, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingClassError(missing.tolist())
    wrong = np.bincount(labels[pred != labels], minlength=num_classes)
    return wrong / counts


def max_min_gap(errors) -> float:
    errors = np.asarray(errors)
    return float(errors.max() - errors.min())


def fairness_metrics(records: Predictions, num_classes: int | None = None) -> Fairness:
    if num_classes is None:
        num_classes = int(max(records.labels.max(), records.reference.max(),
                              records.compressed.max())) + 1
    e_ref = per_class_error(records.labels, records.reference, num_classes)
    e_cmp = per_class_error(records.labels, records.compressed, num_classes)
    delta = (1.0 - e_ref) - (1.0 - e_cmp)
    return Fairness(e_ref.tolist(), e_cmp.tolist(), max_min_gap(e_ref), max_min_gap(e_cmp),
                    delta.tolist())


# --------------------------------------------------------------------------
# attributions


def _selected_logit_grad(logits, cls):
    g = np.zeros_like(logits)
    n = logits.shape[0]
    if logits.ndim == 2:
        c = np.argmax(logits, axis=1) if cls is None else np.broadcast_to(cls, (n,))
        g[np.arange(n), c] = 1.0
    else:
        if cls is None:
            pred = np.argmax(logits, axis=1)
            np.put_along_axis(g, pred[:, None], 1.0, axis=1)
        else:
            g[:, cls] = 1.0
    return g


def saliency_batch(net, inputs, cls=None) -> np.ndarray:
    """Max-normalised ``|d logit / d input|`` for every input of a batch.

    The explained logit is the predicted class (``cls=None``) or ``cls``; for
    per-pixel nets it is summed over pixels.  Channel axes of image inputs are
    summed, so ``[N, C, H, W]`` inputs give ``[N, H, W]`` maps.
    """
    x = np.asarray(inputs, dtype=np.float64)
    logits, tape = autodiff.forward(net, x)
    dx = np.abs(autodiff.backward(tape, _selected_logit_grad(logits, cls), param_grads=False))
    if dx.ndim == 4:
        dx = dx.sum(axis=1)
    peak = dx.reshape(len(dx), -1).max(axis=1)
    peak = peak.reshape((-1,) + (1,) * (dx.ndim - 1))
    return np.where(peak > 0, dx / np.where(peak > 0, peak, 1.0), 0.0)


def saliency(net, x, cls=None) -> np.ndarray:
    """Attribution map for a single input (see :func:`saliency_batch`)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(net.input_shape):
        x = x[None]
    return saliency_batch(net, x, cls)[0]


def soft_iou(a, b, mode: str = "sum") -> float:
    """Soft IoU of two nonnegative maps.

    ``mode="sum"``: sum of element-wise minima over sum of element-wise
    maxima (1 when both maps are zero).  ``mode="mean"``: mean of the
    per-element ratios, elements where both are zero counting as 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"attribution shapes differ: {a.shape} vs {b.shape}")
    if (a < 0).any() or (b < 0).any():
        raise DomainError("attribution maps must be nonnegative")
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    if mode == "mean":
        ratio = np.where(hi > 0, lo / np.where(hi > 0, hi, 1.0), 1.0)
        return float(ratio.mean())
    if mode != "sum":
        raise DomainError(f"unknown soft IoU mode {mode!r}")
    den = hi.sum()
    return 1.0 if den == 0 else float(lo.sum() / den)


def dice(pred_mask, true_mask) -> float:
    p = np.asarray(pred_mask)
    t = np.asarray(true_mask)
    if p.shape != t.shape:
        raise DomainError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise DomainError("dice needs binary masks")
    p, t = p.astype(bool), t.astype(bool)
    size = p.sum() + t.sum()
    return 1.0 if size == 0 else float(2.0 * (p & t).sum() / size)


def mean_dice(pred_masks, true_masks) -> float:
    """Per-image dice averaged over the leading axis."""
    return float(np.mean([dice(p, t) for p, t in zip(pred_masks, true_masks)]))


# --------------------------------------------------------------------------
# report


def fingerprint(inputs, labels) -> str:
    h = hashlib.sha256()
    for arr in (np.ascontiguousarray(inputs, dtype=np.float64), np.ascontiguousarray(labels)):
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass
class MisalignmentReport:
    task: str
    num_classes: int
    n_eval: int
    eval_fingerprint: str
    correct_reference: int
    correct_compressed: int
    fixed_count: int  # reference wrong, compressed right
    accuracy_reference: float
    accuracy_compressed: float
    cie_count: int
    cie_indices: list
    cie_u_count: int
    cie_u_indices: list
    error_reference: list
    error_compressed: list
    gap_reference: float
    gap_compressed: float
    accuracy_delta: list
    mean_iou: float
    iou_indices: list
    per_image_iou: list
    cip_count: int | None = None
    cip_u_count: int | None = None
    cip_per_image: list | None = None
    dice_reference: float | None = None
    dice_compressed: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def gap_delta(self) -> float:
        return self.gap_compressed - self.gap_reference

    def accuracy_identity_holds(self) -> bool:
        """``correct_comp == correct_ref - CIE-U + fixed`` (exact, integer)."""
        return self.correct_compressed == self.correct_reference - self.cie_u_count + self.fixed_count

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None, indent=1) -> str:
        text = json.dumps(self.to_dict(), indent=indent, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "MisalignmentReport":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "MisalignmentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_report(reference, compressed, eval_inputs, eval_labels, *, num_classes=None,
                 iou_sample: int | None = None, iou_mode: str = "sum", seed: int = 0,
                 meta: dict | None = None) -> MisalignmentReport:
    """Run both networks on the evaluation split and assemble every metric.

    Per-pixel networks are treated as segmentation: CIE counts are over pixels
    (reported as CIP too) and dice is computed on class 1.
    """
    X = np.asarray(eval_inputs, dtype=np.float64)
    y = np.asarray(eval_labels)
    C = reference.num_classes if num_classes is None else num_classes
    ref_logits = predict(reference, X)
    cmp_logits = predict(compressed, X)
    recs = Predictions(y, np.argmax(ref_logits, axis=1), np.argmax(cmp_logits, axis=1))
    seg = recs.labels.ndim == 3

    cie, cie_idx = count_cies(recs)
    cie_u, cie_u_idx = count_cie_u(recs)
    fair = fairness_metrics(recs, C)
    ref_ok = recs.reference == recs.labels
    cmp_ok = recs.compressed == recs.labels
    fixed = int(np.count_nonzero(~ref_ok & cmp_ok))
    units = int(y.size)

    n = len(X)
    idx = np.arange(n)
    if iou_sample is not None and iou_sample < n:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=iou_sample, replace=False))
    if len(idx):
        a = saliency_batch(reference, X[idx])
        b = saliency_batch(compressed, X[idx])
        ious = [soft_iou(p, q, iou_mode) for p, q in zip(a, b)]
    else:
        ious = []

    report = MisalignmentReport(
        task="segmentation" if seg else "classification",
        num_classes=int(C),
        n_eval=n,
        eval_fingerprint=fingerprint(X, y),
        correct_reference=int(ref_ok.sum()),
        correct_compressed=int(cmp_ok.sum()),
        fixed_count=fixed,
        accuracy_reference=float(ref_ok.sum() / units),
        accuracy_compressed=float(cmp_ok.sum() / units),
        cie_count=cie,
        cie_indices=cie_idx,
        cie_u_count=cie_u,
        cie_u_indices=cie_u_idx,
        error_reference=fair.error_reference,
        error_compressed=fair.error_compressed,
        gap_reference=fair.gap_reference,
        gap_compressed=fair.gap_compressed,
        accuracy_delta=fair.accuracy_delta,
        mean_iou=float(np.mean(ious)) if ious else 1.0,
        iou_indices=idx.tolist(),
        per_image_iou=ious,
        meta=dict(meta or {}),
    )
    if seg:
        cips = count_cips(recs)
        report.cip_count = cips.count
        report.cip_u_count = cips.u_count
        report.cip_per_image = cips.per_image
        fg = (y == 1).astype(np.uint8)
        report.dice_reference = mean_dice((recs.reference == 1).astype(np.uint8), fg)
        report.dice_compressed = mean_dice((recs.compressed == 1).astype(np.uint8), fg)
    return report


# --------------------------------------------------------------------------
# plain-text dumps


def write_class_table(report: MisalignmentReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "error_reference", "error_compressed", "accuracy_delta"])
        for c, (a, b, d) in enumerate(zip(report.error_reference, report.error_compressed,
                                          report.accuracy_delta)):
            w.writerow([c, repr(float(a)), repr(float(b)), repr(float(d))])
    return path


def write_index_list(indices, path, header="index"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([header])
        w.writerows([i] for i in indices)
    return path


def write_pgm(attribution, path, maxval: int = 255):
    """Write a 2-D map in [0, 1] as a plain (P2) PGM image."""
    a = np.atleast_2d(np.asarray(attribution, dtype=np.float64))
    if a.ndim != 2:
        raise DomainError(f"PGM dump needs a 2-D map, got shape {a.shape}")
    pix = np.clip(np.rint(a * maxval), 0, maxval).astype(int)
    lines = ["P2", f"{a.shape[1]} {a.shape[0]}", str(maxval)]
    lines += [" ".join(map(str, row)) for row in pix]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise DomainError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=float).reshape(h, w) / maxval
