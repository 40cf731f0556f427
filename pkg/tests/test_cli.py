import json
import random

import pytest

from mstn.cli import main
from mstn.score_io import write_musicxml
from mstn.synthetic import random_piece

ABC = """X:1
T:one
M:4/4
L:1/8
K:G
|:GABc d2B2|c2A2 B2G2|GABc d2B2|A2F2 G4:|

X:2
T:waltz
M:3/4
L:1/4
K:D
D F A|d3|]

X:3
T:two
M:4/4
L:1/4
K:Ador
A B c d|e2 d2|c B A G|A4|
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "abc").mkdir()
    (root / "abc" / "tunes.abc").write_text(ABC)
    (root / "xml").mkdir()
    (root / "xml" / "x1.musicxml").write_text(write_musicxml(random_piece(random.Random(0), "x1", 4)))
    corpus = root / "corpus"
    assert main(["ingest", "--abc", str(root / "abc"), "--musicxml", str(root / "xml"), "--out", str(corpus),
                 "--seed", "3"]) == 0
    assert main(["tokenize", "--corpus", str(corpus), "--seed", "3"]) == 0
    assert main(["train", "--data", str(corpus), "--out", str(root / "model"), "--variant", "MSTN-U",
                 "--n-layers", "1", "--n-heads", "2", "--d-model", "16", "--lr", "1e-3", "--epochs", "1",
                 "--warmup-epochs", "0", "--max-steps", "2", "--seed", "3"]) == 0
    return root


def test_ingest_manifest(pipeline):
    manifest = json.loads((pipeline / "corpus" / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["counts"] == {"kept": 3, "UnsupportedTimeSignature": 1}
    kept = [e for e in manifest["pieces"] if e["status"] == "kept"]
    assert {e["id"] for e in kept} == {"1", "3", "x1"}
    assert all({"source", "n_bars", "tonic", "mode"} <= set(e) for e in kept)


def test_tokenize_outputs(pipeline):
    corpus = pipeline / "corpus"
    tmap = json.loads((corpus / "template_map.json").read_text())
    assert tmap["seed"] == 3
    assert set(tmap["map"].values()) == {"1", "3", "x1"}
    assert (corpus / "train.tokens").read_text().startswith("# seed=3\n")
    assert json.loads((corpus / "vocab.json").read_text())["PAD"] == 0


def test_train_outputs(pipeline):
    model = pipeline / "model"
    assert (model / "model.ckpt").exists()
    assert (model / "train_log.csv").read_text().startswith("step,epoch,lr,train_loss,valid_loss")
    cfg = json.loads((model / "train_config.json").read_text())
    assert cfg["train"]["batch_size"] == 8 and cfg["train"]["clip_norm"] == 1.0 and cfg["train"]["seed"] == 3


def test_generate_continuation(pipeline):
    out = pipeline / "samples"
    code = main(["generate", "--ckpt", str(pipeline / "model" / "model.ckpt"), "--template", "1",
                 "--mode", "continuation", "--motif-bar", "1", "--samples", "2", "--out", str(out), "--seed", "1"])
    assert code == 0
    folder = out / "1"
    assert sorted(p.name for p in folder.glob("sample_*")) == [
        "sample_1.musicxml", "sample_1.tokens", "sample_2.musicxml", "sample_2.tokens"]
    assert json.loads((folder / "generation.json").read_text())["seed"] == 1


def test_evaluate_and_report(pipeline):
    report = pipeline / "eval" / "report.json"
    assert main(["evaluate", "--ckpt", str(pipeline / "model" / "model.ckpt"), "--report", str(report),
                 "--seed", "2"]) == 0
    doc = json.loads(report.read_text())
    assert doc["seed"] == 2
    for mode in ("free", "continuation"):
        r = doc["modes"][mode]
        assert len(r["kl"]) == 8 and len(r["similarity"]) == 6
        assert all(row["n_samples"] == 2 for row in r["per_template"])
    assert report.with_suffix(".csv").exists()
    assert main(["report", "--report", str(report), "--out", str(pipeline / "plots")]) == 0
    for name in ("RC-D", "RD-DI", "PD", "DD", "table"):
        assert (pipeline / "plots" / f"{name}.csv").exists()


def test_exit_codes(pipeline, tmp_path):
    assert main(["bogus"]) == 2
    assert main(["generate", "--ckpt", str(pipeline / "model" / "model.ckpt"), "--template", "nope",
                 "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.abc").write_text("X:1\nM:3/4\nK:C\nCDE|\n")
    assert main(["ingest", "--abc", str(tmp_path / "bad.abc"), "--out", str(tmp_path / "c")]) == 3
    assert main(["tokenize", "--corpus", str(tmp_path / "missing")]) == 2


def test_diverged_exit_code(pipeline, monkeypatch):
    import mstn.trainer as trainer_mod
    import torch
    monkeypatch.setattr(trainer_mod, "batch_loss",
                        lambda *a: torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True))
    assert main(["train", "--data", str(pipeline / "corpus"), "--out", str(pipeline / "m2"), "--n-layers", "1",
                 "--d-model", "16", "--n-heads", "2", "--epochs", "1", "--warmup-epochs", "0"]) == 4
