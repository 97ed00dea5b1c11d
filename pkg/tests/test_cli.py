import csv
import json

import numpy as np
import pytest

from mccseg.cli import main
from mccseg.data_pipeline import write_raster
from mccseg.synthetic import write_toy_domains


@pytest.fixture(scope="module")
def domains(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    return write_toy_domains(out, seed=1, n_target_train=2, n_target_test=2, n_source_train=4, size=32)


SMALL = ["--steps", "2", "--batch-size", "4", "--tile-size", "32", "--crop-size", "32", "--window", "32",
         "--val-every", "0", "--mcc-subsample", "256"]


def _train(domains, out, *extra):
    t, s = domains
    return main(["train", "--target", str(t), "--source", str(s), "--out", str(out), *SMALL, *extra])


def test_help_lists_defaults(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    assert "--mcc-temperature" in text and "2.5" in text and "--batch-size" in text


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--target", "x", "--regime", "nope"]) == 1


def test_missing_source_exit_1(domains, tmp_path, capsys):
    code = main(["train", "--target", str(domains[0]), "--regime", "mcc_semi", "--out", str(tmp_path), *SMALL])
    assert code == 1
    assert "source" in capsys.readouterr().err


def test_bad_manifest_exit_1(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text("{}")
    assert main(["ingest", "--manifest", str(bad)]) == 1


def test_ingest(domains, capsys):
    assert main(["ingest", "--manifest", str(domains[0])]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["pairs"] == {"train": 2, "test": 2}
    assert summary["classes"][0] == "unknown"


def test_train_evaluate_report_predict(domains, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(domains, run, "--regime", "mcc_transfer") == 0
    ckpt = run / "checkpoint.pt"
    assert ckpt.exists() and (run / "metrics.jsonl").exists()

    rep = tmp_path / "rep.json"
    assert main(["evaluate", "--checkpoint", str(ckpt), "--target", str(domains[0]), "--window", "32",
                 "--out", str(rep)]) == 0
    table = tmp_path / "table.csv"
    assert main(["report", "--reports", str(rep), "--out", str(table)]) == 0
    with open(table, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][0] == "source_dataset" and rows[1][:2] == ["toy_source", "mcc_transfer"]

    image = tmp_path / "scene.png"
    write_raster(image, np.random.default_rng(0).integers(0, 256, (40, 40, 3), dtype=np.uint8))
    pred = tmp_path / "pred.png"
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(image), "--window", "32",
                 "--out", str(pred)]) == 0
    assert pred.exists()
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(image), "--window", "64",
                 "--out", str(pred)]) == 1


def test_seeded_train_is_byte_identical(domains, tmp_path):
    # the checkpoint records its output directory, so both runs share one
    out = tmp_path / "run"
    names = ("metrics.jsonl", "checkpoint.pt")
    assert _train(domains, out, "--regime", "mcc_semi") == 0
    first = [(out / n).read_bytes() for n in names]
    assert _train(domains, out, "--regime", "mcc_semi") == 0
    assert [(out / n).read_bytes() for n in names] == first


def test_config_file_with_flag_override(domains, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"target": str(domains[0]), "steps": 5, "batch-size": 2, "tile_size": 32,
                               "crop_size": 32, "window": 32, "val_every": 0}))
    out = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--steps", "1", "--out", str(out)]) == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1
    cfg.write_text(json.dumps({"target": str(domains[0]), "nonsense": 1}))
    assert main(["train", "--config", str(cfg)]) == 1


def test_recommend(domains, capsys):
    t, s = domains
    assert main(["recommend", "--target", str(t), "--source", str(s)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "mcc_transfer"
    assert main(["recommend", "--target", str(t), "--source", str(s), "--source-downscale", "2"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "mcc_semi"
    assert main(["recommend", "--target", str(t)]) == 0
    assert capsys.readouterr().out.startswith("supervised")
    assert main(["recommend", "--target", str(t), "--source", str(s), "--source-downscale", "3"]) == 1
