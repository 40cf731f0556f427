"""Teacher-forced training with linear warmup, Adam and checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import LengthMismatch, TrainingDiverged
from .model import Model, ModelConfig
from .numeric import adam_step, clip_grad_norm, config_hash, grad, load_checkpoint, save_checkpoint
from .tokenizer import TokenSequence, Vocab

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 2e-5
    warmup_epochs: float = 5
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    clip_norm: float = 1.0
    max_steps: int | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def teacher_forcing_loss(logits: torch.Tensor, tokens, pad_id: int | None = None) -> torch.Tensor:
    """Mean cross-entropy of logits[t] against tokens[t+1].

    Accepts (L, V) with (L,) tokens or batched (B, L, V) with (B, L).
    Targets equal to ``pad_id`` are excluded.
    """
    t = torch.as_tensor(tokens, dtype=torch.long)
    if logits.dim() == 2:
        logits, t = logits[None], t[None]
    if logits.shape[:2] != t.shape:
        raise LengthMismatch(f"logits {tuple(logits.shape)} vs tokens {tuple(t.shape)}")
    pred = logits[:, :-1].reshape(-1, logits.shape[-1])
    target = t[:, 1:].reshape(-1)
    if pad_id is None:
        return F.cross_entropy(pred, target)
    keep = target != pad_id
    return F.cross_entropy(pred[keep], target[keep])


def next_token_accuracy(logits: torch.Tensor, tokens, pad_id: int | None = None) -> float:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if logits.dim() == 2:
        logits, t = logits[None], t[None]
    pred = logits[:, :-1].argmax(-1)
    target = t[:, 1:]
    keep = torch.ones_like(target, dtype=torch.bool) if pad_id is None else target != pad_id
    return float((pred[keep] == target[keep]).double().mean())


def lr_schedule(epoch: int, step_in_epoch: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear per-step ramp from 0 to base_lr over the warmup epochs, then constant."""
    if cfg.warmup_epochs <= 0:
        return cfg.base_lr
    progress = epoch + step_in_epoch / max(1, steps_per_epoch)
    return cfg.base_lr * min(1.0, progress / cfg.warmup_epochs)


def collate(seqs: Sequence[TokenSequence], pad_id: int):
    """Pad a batch to its longest sequence; returns (tokens, pad_mask, template_ids)."""
    L = max(len(s) for s in seqs)
    toks = np.full((len(seqs), L), pad_id, dtype=np.int64)
    mask = np.ones((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        toks[i, :len(s)] = s.tokens
        mask[i, :len(s)] = False
    return torch.from_numpy(toks), torch.from_numpy(mask), [s.template_id for s in seqs]


def batch_loss(model: Model, seqs: Sequence[TokenSequence], pad_id: int) -> torch.Tensor:
    toks, mask, tids = collate(seqs, pad_id)
    logits = model(toks, tids if model.uses_template else None, mask)
    return teacher_forcing_loss(logits, toks, pad_id)


def evaluate_loss(model: Model, seqs: Sequence[TokenSequence], pad_id: int, batch_size: int = 8) -> float:
    """Token-weighted mean loss; never touches parameters or optimizer state."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            n = sum(len(s) - 1 for s in chunk)
            total += float(batch_loss(model, chunk, pad_id)) * n
            count += n
    return total / max(count, 1)


@dataclass
class TrainResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def save_model(path, model: Model, vocab: Vocab, extra: dict | None = None) -> None:
    meta = model.metadata()
    meta["vocab"] = list(vocab.tokens)
    meta["step"] = model.params.step
    meta["config_hash"] = config_hash(meta["model_config"])
    meta.update(extra or {})
    save_checkpoint(path, model.params.state_arrays(), meta)


def load_model(path) -> tuple[Model, Vocab, dict]:
    arrays, meta = load_checkpoint(path)
    model = Model.from_arrays(arrays, meta)
    return model, Vocab(tuple(meta["vocab"])), meta


def train(
    corpus: Sequence[TokenSequence],
    vocab: Vocab,
    model_config: ModelConfig,
    train_cfg: TrainConfig,
    valid: Sequence[TokenSequence] = (),
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    extra_metadata: dict | None = None,
) -> TrainResult:
    """Jointly optimize model weights and the structure table on ``corpus``.

    Every sequence's ``template_id`` must already name its source piece,
    so transposed copies update one shared structure row.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    templates = sorted({s.template_id for s in corpus})
    if resume is not None:
        model, _, meta = load_model(resume)
        start_epoch = meta.get("epoch", 0) + 1
    else:
        model_config.vocab_size = len(vocab)
        model = Model(model_config, templates)
        start_epoch = 0
    if model.config.max_len < max(len(s) for s in corpus):
        raise ValueError("corpus contains sequences longer than max_len")
    log.info("training %s: %d sequences, %d templates, %d parameters, batch_size=%d, clip_norm=%s",
             model.config.variant, len(corpus), len(templates), model.params.n_values(),
             train_cfg.batch_size, train_cfg.clip_norm)

    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(
            {"train": asdict(train_cfg), "model": asdict(model.config)}, indent=2))
        fh = open(out / "train_log.csv", "a" if resume else "w", newline="")
        writer = csv.writer(fh)
        if not resume:
            writer.writerow(["step", "epoch", "lr", "train_loss", "valid_loss"])

    torch.manual_seed(train_cfg.seed)
    rng = random.Random(train_cfg.seed)
    for _ in range(start_epoch):
        rng.shuffle(list(range(len(corpus))))
    steps_per_epoch = math.ceil(len(corpus) / train_cfg.batch_size)
    pad = vocab.pad
    history: list[dict] = []
    result = TrainResult(model, history)
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            order = list(range(len(corpus)))
            rng.shuffle(order)
            for b in range(steps_per_epoch):
                if train_cfg.max_steps is not None and model.params.step >= train_cfg.max_steps:
                    break
                seqs = [corpus[i] for i in order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
                lr = lr_schedule(epoch, b, steps_per_epoch, train_cfg)
                loss = batch_loss(model, seqs, pad)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss is {value} at step {model.params.step}")
                grad(loss, model.params)
                clip_grad_norm(model.params, train_cfg.clip_norm)
                adam_step(model.params, lr)
                row = {"step": model.params.step, "epoch": epoch, "lr": lr, "train_loss": value,
                       "valid_loss": None}
                history.append(row)
                if writer is not None and model.params.step % train_cfg.log_every == 0:
                    writer.writerow([row["step"], epoch, f"{lr:.6g}", f"{value:.6f}", ""])
            if valid:
                v = evaluate_loss(model, valid, pad, train_cfg.batch_size)
                history[-1]["valid_loss"] = v
                if writer is not None:
                    writer.writerow([model.params.step, epoch, "", "", f"{v:.6f}"])
                log.info("epoch %d step %d train %.4f valid %.4f", epoch, model.params.step,
                         history[-1]["train_loss"], v)
            if out is not None:
                result.checkpoint = out / "model.ckpt"
                save_model(result.checkpoint, model, vocab,
                           {"epoch": epoch, "train_config": asdict(train_cfg), **(extra_metadata or {})})
            if train_cfg.max_steps is not None and model.params.step >= train_cfg.max_steps:
                break
    finally:
        if writer is not None:
            fh.close()
    return result
