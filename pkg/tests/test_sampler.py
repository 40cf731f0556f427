import json
import random

import numpy as np
import pytest
import torch

from mstn.errors import MotifLengthError, UnknownTemplate
from mstn.model import Model, ModelConfig
from mstn.sampler import GenerationRequest, generate, sample_next, tonic_prior, write_samples
from mstn.synthetic import random_piece
from mstn.tokenizer import build_vocab, decode, encode


@pytest.fixture(scope="module")
def setup():
    rng = random.Random(0)
    pieces = [random_piece(rng, f"p{i}", 2, rng.randint(-3, 3)) for i in range(3)]
    vocab = build_vocab(pieces)
    seqs = [encode(p, vocab) for p in pieces]
    cfg = ModelConfig("MSTN-U", n_layers=1, n_heads=2, d_model=16, max_len=2 + 72, vocab_size=len(vocab))
    return Model(cfg, [p.id for p in pieces]), vocab, seqs


def test_sample_next_one_hot():
    rng = np.random.default_rng(0)
    logits = np.full(5, -50.0)
    logits[3] = 50.0
    assert all(sample_next(logits, 1.0, rng) == 3 for _ in range(100))


def test_sample_next_uniform_frequencies():
    rng = np.random.default_rng(1)
    n, k = 10_000, 4
    counts = np.bincount([sample_next(np.zeros(k), 1.0, rng) for _ in range(n)], minlength=k)
    sigma = np.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) < 3 * sigma)


def test_sample_next_low_temperature_is_argmax():
    rng = np.random.default_rng(2)
    logits = np.array([0.1, 0.5, 0.49, -1.0])
    assert all(sample_next(logits, 1e-6, rng) == 1 for _ in range(50))


def test_sample_next_deterministic():
    logits = np.random.default_rng(3).normal(size=9)
    a = [sample_next(logits, 1.0, np.random.default_rng(7)) for _ in range(5)]
    assert len(set(a)) == 1
    with pytest.raises(ValueError):
        sample_next(logits, 0.0, np.random.default_rng(0))


def test_continuation_keeps_motif(setup):
    model, vocab, seqs = setup
    s = seqs[0]
    req = GenerationRequest("continuation", "p0", 3, motif=s.tokens[2:26], key=s.tokens[:2], samples=2, seed=4)
    out = generate(model, vocab, req)
    assert len(out) == 2
    for seq in out.raw:
        assert len(seq) == 2 + 24 * 3
        assert seq.tokens[:26] == s.tokens[:26]
    assert len(out.repairs) == 2
    for seq in out:
        decode(seq, vocab)


def test_free_mode_samples_key_and_decodes(setup):
    model, vocab, _ = setup
    prior = {"tonic_C": 1.0}
    out = generate(model, vocab, GenerationRequest("free", "p1", 2, samples=3, seed=0), prior)
    for seq in out:
        assert vocab.token(seq.tokens[0]) == "tonic_C"
        assert vocab.is_mode(seq.tokens[1])
        decode(seq, vocab)


def test_distinct_seeds_distinct_samples(setup):
    model, vocab, _ = setup
    a = generate(model, vocab, GenerationRequest("free", "p0", 2, samples=1, seed=1))
    b = generate(model, vocab, GenerationRequest("free", "p0", 2, samples=1, seed=2))
    c = generate(model, vocab, GenerationRequest("free", "p0", 2, samples=1, seed=1))
    assert a[0] != b[0]
    assert a[0] == c[0]


def test_request_validation(setup):
    model, vocab, seqs = setup
    with pytest.raises(MotifLengthError):
        GenerationRequest("continuation", "p0", 2, motif=seqs[0].tokens[2:20], key=seqs[0].tokens[:2])
    with pytest.raises(ValueError):
        GenerationRequest("continuation", "p0", 2)
    with pytest.raises(ValueError):
        GenerationRequest("free", "p0", 101)
    with pytest.raises(UnknownTemplate):
        generate(model, vocab, GenerationRequest("free", "nope", 1))


def test_structure_stream_identical_across_samples(setup):
    model, vocab, _ = setup
    out = generate(model, vocab, GenerationRequest("free", "p2", 3, samples=3, seed=5))
    toks = torch.tensor([s.tokens for s in out.raw])
    states = model.forward(toks, "p2", keep_states=True).structure_states
    for h in states:
        assert torch.equal(h[0], h[1]) and torch.equal(h[0], h[2])


def test_tonic_prior(setup):
    _, vocab, seqs = setup
    prior = tonic_prior(seqs, vocab)
    assert sum(prior.values()) == pytest.approx(1.0)
    assert all(k.startswith("tonic_") for k in prior)


def test_write_samples_layout(setup, tmp_path):
    model, vocab, seqs = setup
    out = generate(model, vocab, GenerationRequest("free", "p0", 1, samples=2, seed=0))
    folder = write_samples(tmp_path, "p0", out, vocab, {"seed": 0})
    names = sorted(p.name for p in folder.iterdir())
    assert names == ["generation.json", "sample_1.musicxml", "sample_1.tokens", "sample_2.musicxml", "sample_2.tokens"]
    assert json.loads((folder / "generation.json").read_text())["seed"] == 0
