"""Command-line entry point: ``aligncompress <train|compress|evaluate|compare|sweep>``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

from .errors import AlignCompressError
from .harness.config import dataset_spec_from_dict, load_config
from .harness.experiment import (
    cell_name,
    compare_reports,
    evaluate_checkpoints,
    format_ratio,
    make_dataset,
    run_cell,
    run_experiment,
    summary_row,
    train_reference,
    write_csv,
)
from .metrics import (
    MisalignmentReport,
    saliency_batch,
    write_class_table,
    write_index_list,
    write_pgm,
)
from .models import load_checkpoint, save_checkpoint

log = logging.getLogger("aligncompress")


def _emit(args, data):
    """Print a dict or a list of flat dicts as JSON or CSV."""
    if args.format == "json":
        print(json.dumps(data, indent=1, sort_keys=isinstance(data, dict)))
        return
    rows = data if isinstance(data, list) else [data]
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    sys.stdout.write(buf.getvalue())


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    return cfg


def _out(args, cfg=None) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg.output_dir if cfg is not None else "out")


def cmd_train(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    out = _out(args, cfg)
    net, rows = train_reference(cfg, seed, out_dir=out)
    last = rows[-1] if rows else {}
    _emit(args, {"checkpoint": str(out / "reference.acmp"), "seed": seed, "epochs": len(rows),
                 "train_accuracy": last.get("train_accuracy"),
                 "eval_accuracy": last.get("eval_accuracy")})


def cmd_compress(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    out = _out(args, cfg)
    reference = load_checkpoint(args.reference)
    dataset = make_dataset(cfg.dataset)
    rows = []
    for scheme in cfg.weighting.schemes:
        for terms in cfg.losses.subsets:
            cell = cell_name(scheme, terms)
            net, report, logs = run_cell(cfg, reference, dataset, terms, scheme, seed)
            save_checkpoint(net, out / cell / "compressed.acmp")
            write_csv(logs, out / cell / "compress_log.csv")
            report.to_json(out / cell / "report.json")
            rows.append(summary_row(report, cell, seed))
    write_csv(rows, out / "summary.csv")
    _emit(args, rows)


def _load_dataset_spec(text: str):
    path = Path(text)
    data = json.loads(path.read_text()) if path.exists() else json.loads(text)
    if "dataset" in data and isinstance(data["dataset"], dict):
        data = data["dataset"]  # a whole experiment config is accepted too
    return dataset_spec_from_dict(data)


def cmd_evaluate(args):
    spec = _load_dataset_spec(args.dataset)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = _out(args)
    report = evaluate_checkpoints(args.reference, args.compressed, spec, args.iou_sample)
    report.to_json(out / "report.json")
    write_class_table(report, out / "per_class.csv")
    write_index_list(report.cie_indices, out / "cie_indices.csv")
    write_index_list(report.cie_u_indices, out / "cie_u_indices.csv")
    if args.dump_saliency:
        dataset = make_dataset(spec)
        idx = report.cie_indices[:args.dump_saliency] if report.task == "classification" else \
            list(range(min(args.dump_saliency, report.n_eval)))
        X = dataset.eval_inputs[idx]
        if X.ndim == 4 and idx:
            for tag, path in (("reference", args.reference), ("compressed", args.compressed)):
                maps = saliency_batch(load_checkpoint(path), X)
                for i, m in zip(idx, maps):
                    write_pgm(m, out / "saliency" / f"{i}_{tag}.pgm")
    _emit(args, {k: v for k, v in report.to_dict().items()
                 if not isinstance(v, (list, dict))})


def cmd_compare(args):
    a = MisalignmentReport.from_json(args.a)
    b = MisalignmentReport.from_json(args.b)
    out = compare_reports(a, b)
    if args.format == "json":
        _emit(args, out)
    else:
        shown = {k: (format_ratio(v) if k.endswith("ratio") and v is not None else v)
                 for k, v in out.items()}
        _emit(args, shown)


def cmd_sweep(args):
    cfg = load_config(args.config)
    base = cfg.seeds[0] if args.seed is None else args.seed
    seeds = tuple(range(base, base + args.seeds)) if args.seeds else cfg.seeds
    out = _out(args, cfg)
    results = run_experiment(cfg, out, workers=args.threads, seeds=seeds)
    failed = [r for r in results if r.error]
    log.info("%d cells, %d failed; results in %s", len(results), len(failed), out / cfg.name)
    rows = [summary_row(r.report, r.cell, r.seed) for r in results if r.report is not None]
    if args.format == "csv":
        _emit(args, rows)
    else:
        _emit(args, {"output": str(out / cfg.name), "cells": len(results), "failed": len(failed)})
    return 1 if failed else 0


def _global_flags(parser, suppress=False):
    # subcommands repeat the global flags with SUPPRESS defaults so that a
    # value given before the subcommand is not reset by the subparser
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None),
                        help="override the (first) seed from the config")
    parser.add_argument("--threads", type=int, default=d(1),
                        help="worker processes for independent grid cells")
    parser.add_argument("--format", choices=("json", "csv"), default=d("json"),
                        help="format of the summary printed on stdout")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="aligncompress",
                                description="Compress small networks and measure misalignment.")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train a reference network")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compress", parents=[common],
                       help="compress a reference with every loss subset x scheme of a config")
    s.add_argument("--config", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("evaluate", parents=[common], help="misalignment report for two checkpoints")
    s.add_argument("--reference", required=True)
    s.add_argument("--compressed", required=True)
    s.add_argument("--dataset", required=True,
                   help="dataset spec as a JSON file or inline JSON object")
    s.add_argument("--out")
    s.add_argument("--iou-sample", type=int, default=None)
    s.add_argument("--dump-saliency", type=int, default=0, metavar="N",
                   help="write PGM saliency maps for the first N CIEs (image inputs only)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", parents=[common], help="ratios and deltas between two reports")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", parents=[common], help="run the full loss x scheme x seed grid")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", type=int, default=None, help="number of consecutive seeds")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (AlignCompressError, OSError, json.JSONDecodeError) as exc:
        print(f"aligncompress: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
