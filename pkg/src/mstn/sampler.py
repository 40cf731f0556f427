"""Autoregressive sampling in free and continuation modes."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import MotifLengthError, SequenceTooLong
from .model import Model
from .score_io import MAX_BARS, TICKS_PER_BAR, write_musicxml
from .tokenizer import PREFIX_LEN, TokenSequence, Vocab, decode, repair

log = logging.getLogger(__name__)

MODES = ("free", "continuation")


@dataclass
class GenerationRequest:
    mode: str
    template_id: str | None
    n_bars: int
    motif: Sequence[int] | None = None  # 24 frame token ids
    key: tuple[int, int] | None = None  # (tonic id, mode id) used with the motif
    samples: int = 2
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 1 <= self.n_bars <= MAX_BARS:
            raise ValueError(f"n_bars must be in [1, {MAX_BARS}]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.mode == "continuation":
            if self.motif is None or self.key is None:
                raise ValueError("continuation mode needs a motif and its key tokens")
            if len(self.motif) != TICKS_PER_BAR:
                raise MotifLengthError(f"motif has {len(self.motif)} tokens, expected {TICKS_PER_BAR}")

    @property
    def length(self) -> int:
        return PREFIX_LEN + TICKS_PER_BAR * self.n_bars


@dataclass
class GenerationOutput:
    sequences: list[TokenSequence]
    raw: list[TokenSequence]
    repairs: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]


def sample_next(logits_row, temperature: float, rng: np.random.Generator) -> int:
    """Categorical draw from softmax(logits / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits_row, dtype=np.float64) / temperature
    z = z - np.max(z)
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def tonic_prior(seqs: Sequence[TokenSequence], vocab: Vocab) -> dict[str, float]:
    """Relative frequency of each tonic token at position 0."""
    counts: dict[str, int] = {}
    for s in seqs:
        tok = vocab.token(s.tokens[0])
        counts[tok] = counts.get(tok, 0) + 1
    total = sum(counts.values())
    return {k: v / total for k, v in sorted(counts.items())}


def _prior_logits(vocab: Vocab, prior: Mapping[str, float] | None) -> np.ndarray:
    out = np.full(len(vocab), -np.inf)
    tonics = vocab.ids_where(vocab.is_tonic)
    if not prior:
        out[tonics] = 0.0
        return out
    for tok, p in prior.items():
        if tok in vocab and p > 0:
            out[vocab.id(tok)] = np.log(p)
    return out


def generate(
    model: Model,
    vocab: Vocab,
    request: GenerationRequest,
    prior: Mapping[str, float] | None = None,
) -> GenerationOutput:
    """Draw ``request.samples`` sequences of exactly 2 + 24*n_bars tokens.

    Free mode draws the tonic from ``prior`` (the training tonic frequencies,
    uniform over tonic tokens when absent), keeps the mode token to mode
    ids and samples everything after from the model.  Continuation mode
    starts from the key tokens plus the one-bar motif.
    """
    L = request.length
    if L > model.config.max_len:
        raise SequenceTooLong(f"{request.n_bars} bars need {L} positions, model has {model.config.max_len}")
    tid = request.template_id if model.uses_template else None
    if model.uses_template:
        model.template_row(tid)
    rng = np.random.default_rng(request.seed)
    B = request.samples
    toks = np.zeros((B, L), dtype=np.int64)
    if request.mode == "continuation":
        prime = list(request.key) + list(request.motif)
        toks[:, :len(prime)] = prime
        start = len(prime)
    else:
        first = _prior_logits(vocab, prior)
        for b in range(B):
            toks[b, 0] = sample_next(first, 1.0, rng)
        start = 1
    mode_only = np.full(len(vocab), -np.inf)
    mode_only[vocab.ids_where(vocab.is_mode)] = 0.0
    cache = model.start_decoding([tid] * B if tid is not None else None, B)
    with torch.no_grad():
        last = model.step(torch.from_numpy(toks[:, :start]), cache)[:, -1].numpy()
        for t in range(start, L):
            for b in range(B):
                row = last[b] + mode_only if t == 1 else last[b]
                toks[b, t] = sample_next(row, request.temperature, rng)
            if t + 1 < L:
                last = model.step(torch.from_numpy(toks[:, t:t + 1]), cache)[:, -1].numpy()
    label = request.template_id or "free"
    raw, fixed, counts = [], [], []
    for b in range(B):
        seq = [int(x) for x in toks[b]]
        repaired, n = repair(seq, vocab)
        raw.append(TokenSequence(label, seq))
        fixed.append(TokenSequence(label, repaired))
        counts.append(n)
    log.info("generated %d %s samples for %s; repairs per sample: %s", B, request.mode, label, counts)
    return GenerationOutput(fixed, raw, counts)


def safe_name(template_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.@+-]", "_", template_id)


def write_samples(out_dir, template_id: str, output: GenerationOutput, vocab: Vocab,
                  meta: Mapping | None = None) -> Path:
    """One folder per template holding sample_<i>.tokens and sample_<i>.musicxml.

    ``meta`` (request settings, seed) plus the repair counts go to generation.json.
    """
    folder = Path(out_dir) / safe_name(template_id)
    folder.mkdir(parents=True, exist_ok=True)
    info = {"template_id": template_id, **(meta or {}), "repairs": output.repairs}
    (folder / "generation.json").write_text(json.dumps(info, indent=2))
    for i, seq in enumerate(output.sequences, 1):
        names = " ".join(vocab.token(t) for t in seq.tokens)
        (folder / f"sample_{i}.tokens").write_text(f"template_id={seq.template_id} {names}\n")
        score = decode(seq, vocab, score_id=f"{template_id}/sample_{i}")
        (folder / f"sample_{i}.musicxml").write_text(write_musicxml(score))
    return folder
