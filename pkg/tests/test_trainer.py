import csv
import math
import random

import numpy as np
import pytest
import torch

import mstn.trainer as trainer_mod
from mstn.errors import LengthMismatch, TrainingDiverged
from mstn.model import Model, ModelConfig
from mstn.numeric import adam_step, grad
from mstn.synthetic import random_piece
from mstn.tokenizer import augment_corpus, build_vocab, encode
from mstn.trainer import (
    TrainConfig, batch_loss, evaluate_loss, load_model, lr_schedule, teacher_forcing_loss, train,
)


def tiny_cfg(variant="MSTN-U", max_len=50):
    return ModelConfig(variant, n_layers=1, n_heads=2, d_model=16, max_len=max_len)


def corpus(n=2, bars=2, seed=0):
    rng = random.Random(seed)
    pieces = [random_piece(rng, f"p{i}", bars) for i in range(n)]
    vocab = build_vocab(pieces)
    return pieces, vocab, [encode(p, vocab) for p in pieces]


def test_loss_perfect_and_uniform():
    toks = torch.tensor([1, 3, 0, 2])
    onehot = torch.full((4, 5), -1e4, dtype=torch.float64)
    onehot[torch.arange(3), toks[1:]] = 1e4
    assert teacher_forcing_loss(onehot, toks).item() == 0.0
    uniform = torch.zeros(4, 5, dtype=torch.float64)
    assert teacher_forcing_loss(uniform, toks).item() == pytest.approx(math.log(5), abs=1e-14)


def test_loss_matches_direct_sum():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 4))
    toks = rng.integers(0, 4, size=6)
    total = 0.0
    for t in range(5):
        row = logits[t]
        total += -(row[toks[t + 1]] - math.log(sum(math.exp(x) for x in row)))
    got = teacher_forcing_loss(torch.tensor(logits), toks).item()
    assert got == pytest.approx(total / 5, abs=1e-13)


def test_loss_ignores_pad_targets():
    logits = torch.randn(1, 5, 4, dtype=torch.float64)
    toks = torch.tensor([[1, 2, 3, 0, 0]])
    full = teacher_forcing_loss(logits[:, :3], toks[:, :3])
    assert teacher_forcing_loss(logits, toks, pad_id=0).item() == pytest.approx(full.item(), abs=1e-14)


def test_loss_length_mismatch():
    with pytest.raises(LengthMismatch):
        teacher_forcing_loss(torch.zeros(4, 3, dtype=torch.float64), [0, 1, 2])


def test_lr_schedule():
    cfg = TrainConfig(base_lr=1e-3, warmup_epochs=2, epochs=5)
    assert lr_schedule(0, 0, 10, cfg) == 0.0
    assert lr_schedule(1, 0, 10, cfg) == pytest.approx(5e-4)
    assert lr_schedule(2, 0, 10, cfg) == 1e-3
    assert lr_schedule(4, 7, 10, cfg) == 1e-3


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_epochs=6, epochs=5)
    assert (TrainConfig().base_lr, TrainConfig().warmup_epochs) == (2e-5, 5)


def test_augmented_copies_share_one_row():
    pieces, _, _ = corpus(1)
    aug, tmap = augment_corpus(pieces)
    vocab = build_vocab(aug)
    seqs = [encode(s, vocab, tmap[s.id]) for s in aug[:2]]
    cfg = tiny_cfg()
    cfg.vocab_size = len(vocab)
    m = Model(cfg, ["p0"])
    assert m.params["struct_e"].shape[0] == 1
    g_both = grad(batch_loss(m, seqs, vocab.pad) * 2, m.params)["struct_e"].clone()
    g0 = grad(batch_loss(m, seqs[:1], vocab.pad), m.params)["struct_e"].clone()
    g1 = grad(batch_loss(m, seqs[1:], vocab.pad), m.params)["struct_e"].clone()
    assert torch.allclose(g_both, g0 + g1, atol=1e-14)


def test_reproducible_and_decreasing():
    _, vocab, seqs = corpus(1)
    runs = [train(seqs, vocab, tiny_cfg(), TrainConfig(base_lr=3e-3, warmup_epochs=0, epochs=50, seed=1))
            for _ in range(2)]
    a = [h["train_loss"] for h in runs[0].history]
    b = [h["train_loss"] for h in runs[1].history]
    assert a == b
    assert a[-1] < 0.5 * a[0]


def test_absent_templates_untouched():
    pieces, vocab, seqs = corpus(3)
    res = train(seqs, vocab, tiny_cfg(), TrainConfig(base_lr=1e-2, warmup_epochs=0, epochs=1,
                                                                  max_steps=0))
    m = res.model
    before = m.params["struct_e"].detach().clone()
    grad(batch_loss(m, [seqs[1]], vocab.pad), m.params)
    adam_step(m.params, 1e-2)
    after = m.params["struct_e"].detach()
    row = m.template_row("p1")
    others = [i for i in range(3) if i != row]
    assert torch.equal(after[others], before[others])
    assert not torch.equal(after[row], before[row])


def test_validation_does_not_update():
    _, vocab, seqs = corpus(2)
    res = train(seqs, vocab, tiny_cfg(), TrainConfig(base_lr=1e-3, warmup_epochs=0, epochs=1, max_steps=1))
    snap = res.model.params.state_arrays()
    evaluate_loss(res.model, seqs, vocab.pad)
    after = res.model.params.state_arrays()
    assert all(np.array_equal(snap[k], after[k]) for k in snap)


def test_checkpoint_log_and_resume(tmp_path):
    _, vocab, seqs = corpus(3)
    cfg = TrainConfig(base_lr=1e-3, warmup_epochs=1, epochs=2, batch_size=2)
    res = train(seqs, vocab, tiny_cfg(), cfg, valid=seqs[:1], out_dir=tmp_path, extra_metadata={"seed": 0})
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert list(rows[0]) == ["step", "epoch", "lr", "train_loss", "valid_loss"]
    assert any(r["valid_loss"] for r in rows)
    model, v2, meta = load_model(tmp_path / "model.ckpt")
    assert v2 == vocab and meta["epoch"] == 1 and meta["step"] == 4 and meta["seed"] == 0
    assert torch.equal(model.params["head"], res.model.params["head"])

    more = TrainConfig(base_lr=1e-3, warmup_epochs=1, epochs=3, batch_size=2)
    resumed = train(seqs, vocab, tiny_cfg(), more, out_dir=tmp_path, resume=tmp_path / "model.ckpt")
    assert resumed.model.params.step == 6
    straight = train(seqs, vocab, tiny_cfg(), more)
    assert torch.allclose(resumed.model.params["head"], straight.model.params["head"], atol=1e-12)


def test_divergence_raises(monkeypatch):
    _, vocab, seqs = corpus(1)
    monkeypatch.setattr(trainer_mod, "batch_loss",
                        lambda *a: torch.tensor(float("nan"), dtype=torch.float64, requires_grad=True))
    with pytest.raises(TrainingDiverged):
        train(seqs, vocab, tiny_cfg(), TrainConfig(base_lr=1e-3, warmup_epochs=0, epochs=1))
