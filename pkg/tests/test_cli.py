import json

import pytest

from aligncompress.cli import build_parser, main
from aligncompress.harness.experiment import read_csv
from aligncompress.metrics import MisalignmentReport

CONFIG = {
    "name": "cli",
    "dataset": {"kind": "blobs", "num_classes": 3, "n_per_class": 15},
    "architecture": {"hidden": [8]},
    "train": {"epochs": 3, "batch_size": 16},
    "compression": {"num_steps": 1, "finetune_epochs_per_step": 1},
    "losses": {"subsets": [["CE"], ["CE", "MSE"]]},
    "seeds": [0],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_global_flags_before_and_after_subcommand():
    p = build_parser()
    a = p.parse_args(["--seed", "3", "--format", "csv", "compare", "--a", "x", "--b", "y"])
    assert (a.seed, a.format, a.threads) == (3, "csv", 1)
    b = p.parse_args(["compare", "--a", "x", "--b", "y", "--seed", "4", "--threads", "2"])
    assert (b.seed, b.format, b.threads) == (4, "json", 2)


def test_train_compress_evaluate_compare(tmp_path, config, capsys):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "ref")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["epochs"] == 3
    ref = tmp_path / "ref" / "reference.acmp"
    assert ref.exists() and (tmp_path / "ref" / "train_log.csv").exists()

    assert main(["compress", "--config", str(config), "--reference", str(ref),
                 "--out", str(tmp_path / "cmp"), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("cell,seed,") and len(lines) == 3
    assert len(read_csv(tmp_path / "cmp" / "summary.csv")) == 2

    ds = json.dumps(CONFIG["dataset"])
    assert main(["evaluate", "--reference", str(ref), "--compressed",
                 str(tmp_path / "cmp" / "uniform-CE" / "compressed.acmp"),
                 "--dataset", ds, "--out", str(tmp_path / "ev")]) == 0
    capsys.readouterr()
    rep = MisalignmentReport.from_json(tmp_path / "ev" / "report.json")
    direct = MisalignmentReport.from_json(tmp_path / "cmp" / "uniform-CE" / "report.json")
    assert rep.cie_indices == direct.cie_indices
    assert (tmp_path / "ev" / "per_class.csv").exists()

    a = tmp_path / "cmp" / "uniform-CE" / "report.json"
    assert main(["compare", "--a", str(a), "--b", str(a)]) == 0
    cmp_ = json.loads(capsys.readouterr().out)
    assert cmp_["cie_ratio"] == 1.0 and cmp_["accuracy_delta"] == 0.0


def test_sweep(tmp_path, config, capsys):
    assert main(["sweep", "--config", str(config), "--seeds", "2", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["cells"] == 4 and out["failed"] == 0
    rows = read_csv(tmp_path / "cli" / "summary.csv")
    assert sorted({r["seed"] for r in rows}) == [0, 1]
    assert (tmp_path / "cli" / "reference" / "1" / "reference.acmp").exists()
    assert (tmp_path / "cli" / "uniform-CE+MSE" / "1" / "report.json").exists()


def test_segmentation_saliency_dump(tmp_path, capsys):
    cfg = {"name": "seg", "dataset": {"kind": "seg_blobs", "n_images": 4, "height": 8, "width": 8},
           "architecture": {"widths": [2]}, "train": {"epochs": 1, "batch_size": 4},
           "compression": {"num_steps": 1, "finetune_epochs_per_step": 1},
           "losses": {"subsets": [["CE"]]}}
    path = tmp_path / "seg.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "ref")]) == 0
    assert main(["compress", "--config", str(path), "--reference", str(tmp_path / "ref" / "reference.acmp"),
                 "--out", str(tmp_path / "cmp")]) == 0
    assert main(["evaluate", "--reference", str(tmp_path / "ref" / "reference.acmp"),
                 "--compressed", str(tmp_path / "cmp" / "uniform-CE" / "compressed.acmp"),
                 "--dataset", str(path), "--out", str(tmp_path / "ev"), "--dump-saliency", "2"]) == 0
    assert len(list((tmp_path / "ev" / "saliency").glob("*.pgm"))) == 4


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nme": "typo"}))
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown keys" in capsys.readouterr().err
    assert main(["compare", "--a", str(tmp_path / "nope"), "--b", str(tmp_path / "nope")]) == 2
