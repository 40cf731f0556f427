"""Numerical substrate: masked softmax, parameter store, Adam, gradient checks, checkpoints.

Arrays are float64 torch tensors; torch's autograd records the graph and
runs the reverse sweep.  Everything else here (masking, optimizer,
finite-difference checking, the checkpoint format) is implemented
directly so it can be tested against independent references.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import DataError, NonScalarLoss

DTYPE = torch.float64
INIT_STD = 0.02



def causal_mask(length: int) -> torch.Tensor:
    """Boolean (L, L) matrix, True where query i may attend to key j (j <= i)."""
    return torch.ones(length, length, dtype=torch.bool).tril()


def softmax_rows(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row softmax over the entries where ``mask`` is True; masked entries are exactly 0.

    Rows with no allowed entry come out all-zero instead of NaN.
    """
    live = mask.any(dim=-1, keepdim=True)
    if bool(live.all()):
        return torch.softmax(scores.masked_fill(~mask, -math.inf), dim=-1)
    # open up dead rows so softmax stays finite, then zero them
    A = torch.softmax(scores.masked_fill(~(mask | ~live), -math.inf), dim=-1)
    return A * live


class ParamStore:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(value, dtype=DTYPE).clone().requires_grad_(True)
        self.params[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def n_values(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}

    def state_arrays(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        out = {n: p.detach().numpy().copy() for n, p in self.params.items()}
        if with_optimizer:
            out.update({f"adam.m/{n}": t.numpy().copy() for n, t in self.m.items()})
            out.update({f"adam.v/{n}": t.numpy().copy() for n, t in self.v.items()})
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray], step: int | None = None) -> None:
        with torch.no_grad():
            for n, p in self.params.items():
                if n not in arrays:
                    raise DataError(f"checkpoint lacks parameter {n!r}")
                src = torch.as_tensor(arrays[n], dtype=DTYPE)
                if src.shape != p.shape:
                    raise DataError(f"shape mismatch for {n}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src)
                if f"adam.m/{n}" in arrays:
                    self.m[n] = torch.as_tensor(arrays[f"adam.m/{n}"], dtype=DTYPE).clone()
                    self.v[n] = torch.as_tensor(arrays[f"adam.v/{n}"], dtype=DTYPE).clone()
        if step is not None:
            self.step = step


def grad(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Reverse sweep from a scalar loss; fills and returns every parameter's gradient.

    Parameters the loss does not reach get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise NonScalarLoss(f"loss has shape {tuple(loss.shape)}")
    store.zero_grad()
    loss.reshape(()).backward()
    for p in store.params.values():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return store.grads()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in store.params.values() if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def adam_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter; clears gradients afterwards."""
    b1, b2 = betas
    store.step += 1
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        for n, p in store.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = store.m[n], store.v[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    store.zero_grad()


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    samples_per_param: int | None = 8,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    Checks ``samples_per_param`` random coordinates of each parameter (all
    coordinates when None).  Relative error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    analytic = grad(loss_fn(), store)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name in (names if names is not None else list(store)):
            p = store[name]
            flat = p.view(-1)
            n = flat.numel()
            if samples_per_param is None or samples_per_param >= n:
                idx = range(n)
            else:
                idx = rng.choice(n, size=samples_per_param, replace=False)
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                i = int(i)
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                cd = (up - down) / (2 * eps)
                a = float(a_flat[i])
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
                worst = max(worst, err)
    store.zero_grad()
    return worst


# --------------------------------------------------------------------------
# checkpoint files
#
# layout: 8-byte magic, u64 little-endian header length, JSON header,
# then each tensor's float64 little-endian bytes at the recorded offset.

_MAGIC = b"MSTNCKP1"


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    table = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        if not np.all(np.isfinite(a)):
            raise DataError(f"refusing to save non-finite values in {name!r}")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"metadata": metadata, "tensors": table}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        data = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        buf = data[start:start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise DataError(f"truncated checkpoint at {entry['name']!r}")
        arr = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
        if not np.all(np.isfinite(arr)):
            raise DataError(f"non-finite values in {entry['name']!r}")
        arrays[entry["name"]] = arr
    return arrays, header["metadata"]
