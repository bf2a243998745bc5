import csv
import json

import pytest

from expertchain.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "syn"), "--items", "64", "--test-items", "16"]) == 0
    return root


def test_full_flow(workdir, capsys):
    syn, out = workdir / "syn", workdir / "out"
    ds = str(syn / "dataset.jsonl")
    assert main(["rationale", "--dataset", ds, "--transcript", str(syn / "transcript.jsonl"),
                 "--out", str(out), "--parallel", "4"]) == 0
    assert "64 items" in capsys.readouterr().out
    assert sum(1 for _ in (out / "records.jsonl").open()) == 64

    common = ["--dataset", ds, "--out", str(out), "--records", str(out / "records.jsonl")]
    assert main(["train", *common, "--experts", "4", "--topk", "2", "--epochs", "2", "--lr", "0.1"]) == 0
    ckpt = json.loads((out / "model.json").read_text())
    assert ckpt["format"] == "expertchain-checkpoint/1" and len(ckpt["vocab"]) == 32
    assert len(json.loads((out / "loss.json").read_text())) == 2

    assert main(["eval", *common]) == 0
    preds = [json.loads(line) for line in (out / "predictions.jsonl").open()]
    assert len(preds) == 16
    report = json.loads((out / "report.json").read_text())
    assert report["num_items"] == 16 and set(report["expert_utilization"]) == {"head", "chest", "abdomen", "pelvis"}

    before = (out / "report.json").read_text()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.json").read_text() == before


def test_gridsearch(workdir):
    syn, out = workdir / "syn", workdir / "grid"
    assert main(["gridsearch", "--dataset", str(syn / "dataset.jsonl"), "--out", str(out),
                 "--grid-experts", "2", "--grid-topk", "1,3", "--epochs", "1", "--lr", "0.1", "--hidden", "4"]) == 0
    rows = list(csv.DictReader((out / "grid.csv").open()))
    assert [r["status"] for r in rows] == ["ok", "failed"]
    assert "best: N=2 k=1" in (out / "grid.txt").read_text()


def test_unresolved_items_exit_nonzero(workdir, tmp_path):
    syn = workdir / "syn"
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = main(["rationale", "--dataset", str(syn / "dataset.jsonl"), "--transcript", str(empty),
                 "--strict", "--out", str(tmp_path / "o")])
    assert code == 1
    assert (tmp_path / "o" / "failures.txt").read_text().count("\n") == 64


def test_missing_dataset_flag():
    with pytest.raises(SystemExit):
        main(["train"])
