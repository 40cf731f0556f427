"""Autoregressive melody models: MT, CMT, MSTN-C and MSTN-U.

MT is a plain pre-norm decoder.  CMT prepends one control embedding
derived from the template's structure vector.  The MSTN variants keep
two hidden streams, a structure stream ``h_d`` seeded with position plus
per-template structure embedding and a note stream ``h_x`` seeded with
token embeddings, that only interact inside separable attention:

* MSTN-C: one attention matrix from ``(h_d + lam*h_x)`` drives both streams.
* MSTN-U: the structure stream attends with its own queries/keys from
  ``h_d`` alone, so it never depends on the note tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import SequenceTooLong, ShapeMismatch, UnknownTemplate
from .numeric import DTYPE, INIT_STD, ParamStore, causal_mask, softmax_rows

VARIANTS = ("MT", "CMT", "MSTN-C", "MSTN-U")
SEPARABLE = ("MSTN-C", "MSTN-U")


@dataclass
class ModelConfig:
    variant: str = "MSTN-U"
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    lam: float = 0.1
    max_len: int = 2 + 384
    vocab_size: int = 0
    seed: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def full_scale(cls, variant: str, vocab_size: int, seed: int = 0) -> "ModelConfig":
        return cls(variant, n_layers=7, n_heads=8, d_model=256, lam=0.1, max_len=2 + 2400,
                   vocab_size=vocab_size, seed=seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class StreamState:
    h_d: torch.Tensor
    h_x: torch.Tensor


@dataclass
class ForwardResult:
    logits: torch.Tensor
    # hidden states after embedding (index 0) and after every block
    structure_states: list[torch.Tensor] = field(default_factory=list)
    note_states: list[torch.Tensor] = field(default_factory=list)


@dataclass
class DecodeCache:
    """Per-layer keys and values of an already processed prefix."""

    template_ids: list[str] | None
    batch: int
    length: int = 0
    kv: dict[str, torch.Tensor] = field(default_factory=dict)


def _kv(cache: DecodeCache | None, prefix: str):
    """Extend cached keys/values with the new rows; identity without a cache."""
    def extend(name, x):
        if cache is None:
            return x
        key = prefix + name
        if key in cache.kv:
            x = torch.cat([cache.kv[key], x], dim=1)
        cache.kv[key] = x
        return x
    return extend


def _normal(rng: np.random.Generator, *shape, std=INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Model:
    """Parameters plus the forward pass of one variant."""

    def __init__(self, config: ModelConfig, templates: Sequence[str] = (), init_std: float = INIT_STD):
        self.config = config
        self.templates = list(templates)
        self.template_index = {t: i for i, t in enumerate(self.templates)}
        if len(self.template_index) != len(self.templates):
            raise ValueError("duplicate template ids")
        self.params = ParamStore()
        self._init_params(init_std)

    # ------------------------------------------------------------------ setup

    def _init_params(self, std: float) -> None:
        c, p = self.config, self.params
        rng = np.random.default_rng(c.seed)
        D, V = c.d_model, c.vocab_size
        p.add("tok_emb", _normal(rng, V, D, std=std))
        p.add("pos_emb", _normal(rng, c.max_len, D, std=std))
        if c.variant != "MT":
            # e_d carries a unit-scale random code per template; w_t scales it per step
            p.add("struct_e", rng.normal(0.0, 1.0, size=(max(1, len(self.templates)), D)))
            p.add("struct_w", _normal(rng, c.max_len, D, std=std))
        streams = ("d", "x") if c.variant in SEPARABLE else ("",)
        if c.variant == "MSTN-C":
            proj = ("W_q", "W_k", "W_d", "W_x")
        elif c.variant == "MSTN-U":
            proj = ("W_qx", "W_kx", "W_qd", "W_kd", "W_vd", "W_vx")
        else:
            proj = ("W_q", "W_k", "W_v")
        inner = c.ffn_mult * D
        for layer in range(c.n_layers):
            pre = f"block{layer}."
            for name in proj:
                p.add(pre + name, _normal(rng, D, D, std=std))
            for s in streams:
                tag = f"_{s}" if s else ""
                p.add(f"{pre}ln1{tag}.g", np.ones(D))
                p.add(f"{pre}ln1{tag}.b", np.zeros(D))
                p.add(f"{pre}ln2{tag}.g", np.ones(D))
                p.add(f"{pre}ln2{tag}.b", np.zeros(D))
                p.add(f"{pre}ffn{tag}.W1", _normal(rng, D, inner, std=std))
                p.add(f"{pre}ffn{tag}.b1", np.zeros(inner))
                p.add(f"{pre}ffn{tag}.W2", _normal(rng, inner, D, std=std))
                p.add(f"{pre}ffn{tag}.b2", np.zeros(D))
        p.add("ln_f.g", np.ones(D))
        p.add("ln_f.b", np.zeros(D))
        p.add("head", _normal(rng, D, V, std=std))

    @property
    def uses_template(self) -> bool:
        return self.config.variant != "MT"

    def template_row(self, template_id: str) -> int:
        try:
            return self.template_index[template_id]
        except KeyError:
            raise UnknownTemplate(f"template {template_id!r} is not registered") from None

    # --------------------------------------------------------------- pieces

    def structure_embedding(self, template_id: str, length: int) -> torch.Tensor:
        """Rows ``w_t * e_d`` for t < length (elementwise product)."""
        if length > self.config.max_len:
            raise SequenceTooLong(f"length {length} exceeds max_len {self.config.max_len}")
        if not self.uses_template:
            raise UnknownTemplate("the MT variant has no structure table")
        e = self.params["struct_e"][self.template_row(template_id)]
        return self.params["struct_w"][:length] * e

    def control_code(self, template_id: str) -> torch.Tensor:
        """CMT control embedding: mean over all timesteps of ``w_t * e_d``."""
        e = self.params["struct_e"][self.template_row(template_id)]
        return (self.params["struct_w"] * e).mean(dim=0)

    def _lookup(self, tokens) -> torch.Tensor:
        t = torch.as_tensor(tokens, dtype=torch.long)
        if t.dim() == 1:
            t = t[None]
        if t.shape[1] > self.config.max_len:
            raise SequenceTooLong(f"length {t.shape[1]} exceeds max_len {self.config.max_len}")
        return t

    def embed_inputs(self, tokens, template_ids=None):
        """Layer-0 hidden states.

        Returns a StreamState for the MSTN variants, otherwise one fused
        (B, L, D) tensor; for CMT the control code occupies position 0 and
        the result is one step longer than the input.
        """
        t = self._lookup(tokens)
        ids = self._template_list(template_ids, t.shape[0]) if self.uses_template else None
        return self._embed_from(t, ids, 0)

    def _template_list(self, template_ids, batch: int) -> list[str]:
        if template_ids is None:
            raise UnknownTemplate(f"variant {self.config.variant} needs a template id")
        if isinstance(template_ids, str):
            return [template_ids] * batch
        ids = list(template_ids)
        if len(ids) != batch:
            raise ShapeMismatch(f"{len(ids)} template ids for batch of {batch}")
        return ids

    def _layer_norm(self, h, name):
        return F.layer_norm(h, (h.shape[-1],), self.params[name + ".g"], self.params[name + ".b"], 1e-5)

    def _ffn(self, h, name):
        p = self.params
        return F.gelu(h @ p[name + ".W1"] + p[name + ".b1"]) @ p[name + ".W2"] + p[name + ".b2"]

    def _heads(self, x):
        B, L, D = x.shape
        H = self.config.n_heads
        return x.view(B, L, H, D // H).transpose(1, 2)

    def _merge(self, x):
        B, H, L, Dh = x.shape
        return x.transpose(1, 2).reshape(B, L, H * Dh)

    def _att(self, q, k, mask):
        """Attention coefficients, (B, H, L, L)."""
        qh, kh = self._heads(q), self._heads(k)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.config.head_dim)
        return softmax_rows(scores, mask)

    def _apply(self, A, v):
        return self._merge(A @ self._heads(v))

    # ---------------------------------------------------------- attention

    def separable_attention_C(self, h_d, h_x, layer: int, mask, cache=None):
        """Shared coefficients from (h_d + lam*h_x); values from each stream separately."""
        if h_d.shape != h_x.shape:
            raise ShapeMismatch(f"{tuple(h_d.shape)} vs {tuple(h_x.shape)}")
        p, pre = self.params, f"block{layer}."
        kv = _kv(cache, pre)
        mix = h_d + self.config.lam * h_x
        A = self._att(mix @ p[pre + "W_q"], kv("k", mix @ p[pre + "W_k"]), mask)
        return self._apply(A, kv("d", h_d @ p[pre + "W_d"])), self._apply(A, kv("x", h_x @ p[pre + "W_x"]))

    def separable_attention_U(self, h_d, h_x, layer: int, mask, cache=None):
        """Structure path reads h_d only; note path keys/queries from (h_d + lam*h_x)."""
        if h_d.shape != h_x.shape:
            raise ShapeMismatch(f"{tuple(h_d.shape)} vs {tuple(h_x.shape)}")
        p, pre = self.params, f"block{layer}."
        kv = _kv(cache, pre)
        A_d = self._att(h_d @ p[pre + "W_qd"], kv("kd", h_d @ p[pre + "W_kd"]), mask)
        a_d = self._apply(A_d, kv("vd", h_d @ p[pre + "W_vd"]))
        mix = h_d + self.config.lam * h_x
        A_x = self._att(mix @ p[pre + "W_qx"], kv("kx", mix @ p[pre + "W_kx"]), mask)
        return a_d, self._apply(A_x, kv("vx", h_x @ p[pre + "W_vx"]))

    def _fused_attention(self, h, layer: int, mask, cache=None):
        p, pre = self.params, f"block{layer}."
        kv = _kv(cache, pre)
        A = self._att(h @ p[pre + "W_q"], kv("k", h @ p[pre + "W_k"]), mask)
        return self._apply(A, kv("v", h @ p[pre + "W_v"]))

    # ------------------------------------------------------------ forward

    def _mask(self, L: int, key_padding=None, start: int = 0):
        mask = causal_mask(start + L)[start:][None, None]
        if key_padding is not None:
            mask = mask & ~key_padding[:, None, None, :]
        return mask

    def forward(self, tokens, template_ids=None, pad_mask=None, keep_states: bool = False) -> ForwardResult:
        """Logits (B, L, V) for next-token prediction at every input position.

        ``pad_mask`` (B, L) marks padding positions, which are hidden from
        attention keys.
        """
        return self._run(self._lookup(tokens), template_ids, pad_mask, keep_states)

    def start_decoding(self, template_ids, batch: int) -> DecodeCache:
        ids = self._template_list(template_ids, batch) if self.uses_template else None
        return DecodeCache(ids, batch)

    def step(self, tokens, cache: DecodeCache) -> torch.Tensor:
        """Logits (B, n, V) for ``n`` new tokens appended to the cached prefix.

        Equal to the matching rows of a full forward over the whole prefix.
        """
        t = torch.as_tensor(tokens, dtype=torch.long)
        if t.dim() == 1:
            t = t[:, None]
        if t.shape[0] != cache.batch:
            raise ShapeMismatch(f"batch {t.shape[0]} vs cache batch {cache.batch}")
        if cache.length + t.shape[1] > self.config.max_len:
            raise SequenceTooLong(f"length {cache.length + t.shape[1]} exceeds max_len {self.config.max_len}")
        with torch.no_grad():
            logits = self._run(t, cache.template_ids, None, False, cache).logits
        cache.length += t.shape[1]
        return logits

    def _embed_from(self, t, ids, start: int):
        L = t.shape[1]
        tok = self.params["tok_emb"][t]
        pos = self.params["pos_emb"][start:start + L]
        v = self.config.variant
        if v == "MT":
            return tok + pos
        if v == "CMT":
            h = tok + pos
            if start == 0:
                codes = torch.stack([self.control_code(i) for i in ids])[:, None, :]
                h = torch.cat([codes, h], dim=1)
            return h
        rows = [self.template_row(i) for i in ids]
        e_d = self.params["struct_w"][start:start + L] * self.params["struct_e"][rows][:, None, :]
        return StreamState(h_d=pos + e_d, h_x=tok)

    def _run(self, t, template_ids, pad_mask, keep_states: bool, cache: DecodeCache | None = None) -> ForwardResult:
        B, L = t.shape
        start = 0 if cache is None else cache.length
        if pad_mask is not None:
            pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool).reshape(B, L)
        v = self.config.variant
        result = ForwardResult(logits=None)
        if v in SEPARABLE:
            state = self._embed_from(t, self._template_list(template_ids, B), start)
            h_d, h_x = state.h_d, state.h_x
            mask = self._mask(L, pad_mask, start)
            attn = self.separable_attention_C if v == "MSTN-C" else self.separable_attention_U
            if keep_states:
                result.structure_states.append(h_d)
                result.note_states.append(h_x)
            for layer in range(self.config.n_layers):
                pre = f"block{layer}."
                n_d = self._layer_norm(h_d, pre + "ln1_d")
                n_x = self._layer_norm(h_x, pre + "ln1_x")
                a_d, a_x = attn(n_d, n_x, layer, mask, cache)
                h_d = h_d + a_d
                h_x = h_x + a_x
                h_d = h_d + self._ffn(self._layer_norm(h_d, pre + "ln2_d"), pre + "ffn_d")
                h_x = h_x + self._ffn(self._layer_norm(h_x, pre + "ln2_x"), pre + "ffn_x")
                if keep_states:
                    result.structure_states.append(h_d)
                    result.note_states.append(h_x)
            out = h_x
        else:
            ids = self._template_list(template_ids, B) if v == "CMT" else None
            h = self._embed_from(t, ids, start)
            # CMT holds its control code at fused position 0
            offset = 1 if v == "CMT" and start == 0 else 0
            shift = 1 if v == "CMT" and start > 0 else 0
            if pad_mask is not None and offset:
                pad_mask = torch.cat([torch.zeros(B, 1, dtype=torch.bool), pad_mask], dim=1)
            mask = self._mask(L + offset, pad_mask, start + shift)
            if keep_states:
                result.note_states.append(h)
            for layer in range(self.config.n_layers):
                pre = f"block{layer}."
                h = h + self._fused_attention(self._layer_norm(h, pre + "ln1"), layer, mask, cache)
                h = h + self._ffn(self._layer_norm(h, pre + "ln2"), pre + "ffn")
                if keep_states:
                    result.note_states.append(h)
            out = h[:, offset:]
        result.logits = self._layer_norm(out, "ln_f") @ self.params["head"]
        return result

    def __call__(self, tokens, template_ids=None, pad_mask=None) -> torch.Tensor:
        return self.forward(tokens, template_ids, pad_mask).logits

    def model_forward(self, tokens, template_id=None) -> torch.Tensor:
        """Logits (L, V) for a single unbatched sequence."""
        return self.forward(tokens, template_id).logits[0]

    # -------------------------------------------------------- persistence

    def metadata(self) -> dict:
        return {"model_config": asdict(self.config), "templates": self.templates}

    @classmethod
    def from_arrays(cls, arrays, metadata: dict) -> "Model":
        model = cls(ModelConfig.from_dict(metadata["model_config"]), metadata.get("templates", []))
        model.params.load_arrays(arrays, metadata.get("step"))
        return model
