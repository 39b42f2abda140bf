"""Transformer building blocks, losses, gradient checking and checkpoint I/O.

Autograd comes from torch; everything else (attention, layer stack,
incremental decoding cache, checkpoint format) is defined here.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

INIT_STD = 0.02
FFN_MULT = 4


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def positional_encoding(length: int, dim: int, *, dtype=torch.float32, base: float = 10000.0) -> torch.Tensor:
    """Sinusoidal table: even columns sin(pos / base^(2i/dim)), odd columns cos(...)."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    if length < 0:
        raise ValueError("negative length")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table.to(dtype)


def causal_mask(length: int, device=None) -> torch.Tensor:
    """True where attention is forbidden (key after query)."""
    return torch.ones(length, length, dtype=torch.bool, device=device).triu(1)


def causal_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int):
    """Multi-head scaled dot-product attention with a triangular mask.

    ``q``, ``k``, ``v`` have shape (..., L, D). Returns the concatenated head
    outputs (..., L, D) and the attention weights (..., heads, L, L).
    """
    *lead, length, dim = q.shape
    if dim % heads:
        raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
    hd = dim // heads

    def split(x):
        return x.reshape(*lead, length, heads, hd).transpose(-3, -2)

    scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(hd)
    scores = scores.masked_fill(causal_mask(length, q.device), float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ split(v)).transpose(-3, -2).reshape(*lead, length, dim)
    return out, weights


def _init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.normal_(layer.weight, 0.0, INIT_STD)
    nn.init.zeros_(layer.bias)
    return layer


@dataclass
class LayerCache:
    keys: torch.Tensor | None = None  # (heads, t, head_dim)
    values: torch.Tensor | None = None

    def __len__(self):
        return 0 if self.keys is None else self.keys.shape[-2]


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.query = _init_linear(nn.Linear(dim, dim))
        self.key = _init_linear(nn.Linear(dim, dim))
        self.value = _init_linear(nn.Linear(dim, dim))
        self.out = _init_linear(nn.Linear(dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = causal_attention(self.query(x), self.key(x), self.value(x), self.heads)
        return self.out(out)

    def step(self, x: torch.Tensor, cache: LayerCache) -> torch.Tensor:
        """Attend from one new position ``x`` (D,) over the cached prefix plus itself."""
        hd = self.dim // self.heads
        q = self.query(x).reshape(self.heads, 1, hd)
        k = self.key(x).reshape(self.heads, 1, hd)
        v = self.value(x).reshape(self.heads, 1, hd)
        cache.keys = k if cache.keys is None else torch.cat([cache.keys, k], dim=1)
        cache.values = v if cache.values is None else torch.cat([cache.values, v], dim=1)
        weights = torch.softmax(q @ cache.keys.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        return self.out((weights @ cache.values).reshape(self.dim))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or FFN_MULT * dim
        self.inner = _init_linear(nn.Linear(dim, hidden))
        self.outer = _init_linear(nn.Linear(hidden, dim))

    def forward(self, x):
        return self.outer(torch.relu(self.inner(x)))


class TransformerLayer(nn.Module):
    """Post-norm decoder layer: LN(x + attn(x)) then LN(x + ffn(x))."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = CausalSelfAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn(x))

    def step(self, x, cache: LayerCache):
        x = self.norm1(x + self.attn.step(x, cache))
        return self.norm2(x + self.ffn(x))


class TransformerStack(nn.Module):
    """N causal layers. Positional encoding is the caller's job."""

    def __init__(self, n_layers: int, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(TransformerLayer(dim, heads) for _ in range(n_layers))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected width {self.dim}, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer(x)
        return x

    def new_cache(self) -> list[LayerCache]:
        return [LayerCache() for _ in self.layers]

    def step(self, x: torch.Tensor, cache: list[LayerCache]) -> torch.Tensor:
        for layer, c in zip(self.layers, cache):
            x = layer.step(x, c)
        return x


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.hidden = _init_linear(nn.Linear(d_in, hidden))
        self.proj = _init_linear(nn.Linear(hidden, d_out))

    def forward(self, x):
        return self.proj(torch.relu(self.hidden(x)))


def softmax_cross_entropy(logits, target: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[target]`` and its gradient ``softmax - onehot``."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= target < z.shape[-1]:
        raise IndexError(f"target {target} outside [0, {z.shape[-1]})")
    top = int(z.argmax())
    shifted = z - z[top]
    # log1p keeps tiny losses accurate, e.g. logits [10, -10]
    log_norm = math.log1p(np.exp(np.delete(shifted, top)).sum())
    loss = log_norm - shifted[target]
    grad = np.exp(shifted - log_norm)
    grad[target] -= 1.0
    return float(loss), grad


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-5,
    *,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> float:
    """Largest relative error between autograd and central finite differences.

    ``fn`` evaluates a scalar from the current parameter values. With
    ``max_entries`` only that many randomly chosen entries of each parameter
    are probed. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.

    Keep ``fn`` of order one (e.g. a mean rather than a sum of losses): the
    rounding error of a central difference is about ``ulp(fn) / eps``.
    """
    params = [p for p in params]
    for p in params:
        p.grad = None
    loss = fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            g = torch.zeros_like(p).view(-1) if g is None else g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = g[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


# --- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = "HATCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: Mapping) -> None:
    """Write a named-tensor table: magic line, JSON header line, raw little-endian data."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        code = _DTYPES[t.dtype]
        blob = t.numpy().astype(code, copy=False).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"meta": dict(meta), "config_hash": config_hash(meta.get("config", {})), "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1]}")
        header = json.loads(fh.readline())
        data = fh.read()
    meta = header["meta"]
    if header["config_hash"] != config_hash(meta.get("config", {})):
        raise ValueError(f"{path}: config hash mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, meta
