"""Train -> compress -> evaluate pipeline over a loss-subset x scheme x seed grid."""

from __future__ import annotations

import csv
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..compression import compress
from ..errors import DomainError
from ..metrics import MisalignmentReport, build_report
from ..models import build_classifier, build_segmenter, load_checkpoint, save_checkpoint
from ..training import accuracy, fit, predict
from .config import DatasetSpec, ExperimentConfig
from .datasets import Dataset, gen_blobs, gen_seg_blobs

log = logging.getLogger(__name__)

SUMMARY_METRICS = (
    "accuracy_reference", "accuracy_compressed", "cie_count", "cie_u_count", "cip_count",
    "cip_u_count", "gap_reference", "gap_compressed", "mean_iou", "dice_reference",
    "dice_compressed", "sparsity",
)


def make_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "blobs":
        return gen_blobs(spec.num_classes, spec.n_per_class, spec.dim, spec.spread, spec.seed,
                         spec.n_eval_per_class)
    return gen_seg_blobs(spec.n_images, spec.height, spec.width, spec.seed, spec.noise,
                         spec.max_ellipses, spec.n_eval_images)


def build_network(config: ExperimentConfig, dataset: Dataset, seed: int):
    if dataset.task == "segmentation":
        c, h, w = dataset.input_shape
        return build_segmenter(c, config.architecture.widths, dataset.num_classes, h, w, seed=seed)
    return build_classifier(dataset.input_shape[0], config.architecture.hidden,
                            dataset.num_classes, seed=seed)


def cell_name(scheme: str, terms) -> str:
    return f"{scheme}-{'+'.join(terms)}"


# --------------------------------------------------------------------------
# CSV helpers


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_csv(rows: list[dict], path, fieldnames=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in fieldnames})
    return path


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# pipeline


def train_reference(config: ExperimentConfig, seed: int | None = None, dataset: Dataset | None = None,
                    out_dir=None):
    """Train the reference network; return ``(net, log_rows)``.

    With ``out_dir`` the checkpoint (``reference.acmp``) and ``train_log.csv``
    are written there.
    """
    seed = config.seeds[0] if seed is None else seed
    dataset = make_dataset(config.dataset) if dataset is None else dataset
    net = build_network(config, dataset, seed)

    def on_epoch(epoch, row):
        row["train_accuracy"] = accuracy(net, *dataset.train)
        row["eval_accuracy"] = accuracy(net, *dataset.eval)

    rows = fit(net, *dataset.train, config.train, seed=seed, on_epoch=on_epoch)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(net, out_dir / "reference.acmp")
        write_csv(rows, out_dir / "train_log.csv")
    return net, rows


def run_cell(config: ExperimentConfig, reference, dataset: Dataset, terms, scheme: str, seed: int):
    """Compress ``reference`` with one loss subset + scheme; return ``(net, report, logs)``."""
    bundle = config.losses.bundle(terms)
    net, logs = compress(reference, config.compression, bundle, config.weighting.config(scheme),
                         config.train, dataset.train, dataset.eval, seed=seed)
    report = build_report(reference, net, *dataset.eval, num_classes=dataset.num_classes,
                          iou_sample=config.evaluation.iou_sample,
                          iou_mode=config.evaluation.iou_mode, seed=seed,
                          meta={"cell": cell_name(scheme, terms), "seed": seed,
                                "scheme": scheme, "terms": list(terms),
                                "sparsity": net.sparsity()})
    return net, report, logs


def summary_row(report: MisalignmentReport, cell: str, seed: int) -> dict:
    d = report.to_dict()
    row = {"cell": cell, "seed": seed}
    for k in SUMMARY_METRICS:
        row[k] = report.meta.get(k) if k == "sparsity" else d.get(k)
    return row


def aggregate(rows: list[dict]) -> list[dict]:
    """Median / min / max of every numeric summary metric, per cell."""
    cells: dict[str, list[dict]] = {}
    for r in rows:
        cells.setdefault(r["cell"], []).append(r)
    out = []
    for cell, rs in cells.items():
        agg = {"cell": cell, "n_seeds": len(rs)}
        for k in SUMMARY_METRICS:
            vals = [r[k] for r in rs if isinstance(r.get(k), (int, float))]
            if vals:
                agg[f"{k}_median"] = float(np.median(vals))
                agg[f"{k}_min"] = float(np.min(vals))
                agg[f"{k}_max"] = float(np.max(vals))
        out.append(agg)
    return out


@dataclass
class CellResult:
    cell: str
    seed: int
    report: MisalignmentReport | None
    logs: list
    error: str | None = None


def _cell_job(args):
    config, ref_path, terms, scheme, seed, cell_dir = args
    cell = cell_name(scheme, terms)
    try:
        dataset = make_dataset(config.dataset)
        reference = load_checkpoint(ref_path)
        net, report, logs = run_cell(config, reference, dataset, terms, scheme, seed)
        if cell_dir is not None:
            cell_dir = Path(cell_dir)
            report.to_json(cell_dir / "report.json")
            write_csv(logs, cell_dir / "compress_log.csv")
            save_checkpoint(net, cell_dir / "compressed.acmp")
        return CellResult(cell, seed, report, logs)
    except Exception:  # noqa: BLE001 - a failed cell must not stop the grid
        log.exception("cell %s seed %d failed", cell, seed)
        return CellResult(cell, seed, None, [], traceback.format_exc())


def run_experiment(config: ExperimentConfig, out_dir=None, workers: int = 1,
                   seeds=None) -> list[CellResult]:
    """Run every (loss subset x scheme x seed) cell.

    One reference per seed is trained first and shared by every cell of that
    seed.  Writes ``<out>/<name>/<cell>/<seed>/report.json`` plus top-level
    ``summary.csv`` and ``aggregate.csv`` when ``out_dir`` is given (reference
    checkpoints go to a temporary directory otherwise).
    """
    import tempfile

    seeds = config.seeds if seeds is None else tuple(seeds)
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        root = Path(tmp.name)
    else:
        root = Path(out_dir) / config.name
    try:
        dataset = make_dataset(config.dataset)
        ref_paths = {}
        for seed in seeds:
            ref_dir = root / "reference" / str(seed)
            train_reference(config, seed, dataset, ref_dir)
            ref_paths[seed] = ref_dir / "reference.acmp"

        jobs = []
        for seed in seeds:
            for scheme in config.weighting.schemes:
                for terms in config.losses.subsets:
                    cell_dir = None if out_dir is None else root / cell_name(scheme, terms) / str(seed)
                    jobs.append((config, ref_paths[seed], terms, scheme, seed, cell_dir))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_cell_job, jobs))
        else:
            results = [_cell_job(j) for j in jobs]

        if out_dir is not None:
            rows = [summary_row(r.report, r.cell, r.seed) for r in results if r.report is not None]
            write_csv(rows, root / "summary.csv", ["cell", "seed", *SUMMARY_METRICS])
            write_csv(aggregate(rows), root / "aggregate.csv")
            failures = [{"cell": r.cell, "seed": r.seed, "error": r.error.strip().splitlines()[-1]}
                        for r in results if r.error]
            if failures:
                write_csv(failures, root / "failures.csv")
        return results
    finally:
        if tmp is not None:
            tmp.cleanup()


def _ratio(a, b):
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else "inf"
    return a / b


def compare_reports(a: MisalignmentReport, b: MisalignmentReport) -> dict:
    """How ``b`` compares with baseline ``a``.

    Count ratios are ``a / b`` (so 1903 vs 465 gives 4.09, i.e. ``b`` has
    4.09x fewer CIEs); a zero denominator gives the string ``"inf"``.
    Deltas are ``b - a``.
    """
    if a.eval_fingerprint != b.eval_fingerprint:
        raise DomainError("reports were computed on different evaluation splits")
    out = {
        "cie_ratio": _ratio(a.cie_count, b.cie_count),
        "cie_u_ratio": _ratio(a.cie_u_count, b.cie_u_count),
        "cip_ratio": _ratio(a.cip_count, b.cip_count),
        "accuracy_delta": b.accuracy_compressed - a.accuracy_compressed,
        "gap_delta": b.gap_compressed - a.gap_compressed,
        "iou_delta": b.mean_iou - a.mean_iou,
    }
    if a.dice_compressed is not None and b.dice_compressed is not None:
        out["dice_delta"] = b.dice_compressed - a.dice_compressed
    return out


def format_ratio(r) -> str:
    if isinstance(r, str) or r is None:
        return str(r)
    return f"{r:.2f}x" if math.isfinite(r) else "inf"


def evaluate_checkpoints(reference_path, compressed_path, dataset_spec: DatasetSpec,
                         iou_sample=None) -> MisalignmentReport:
    dataset = make_dataset(dataset_spec)
    ref = load_checkpoint(reference_path)
    cmp_ = load_checkpoint(compressed_path)
    return build_report(ref, cmp_, *dataset.eval, num_classes=dataset.num_classes,
                        iou_sample=iou_sample, meta={"sparsity": cmp_.sparsity()})


__all__ = [
    "aggregate", "build_network", "cell_name", "compare_reports", "evaluate_checkpoints",
    "make_dataset", "predict", "read_csv", "run_cell", "run_experiment", "summary_row",
    "train_reference", "write_csv",
]
