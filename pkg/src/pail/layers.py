"""Attention primitives and small network blocks shared by the policy, value and discriminator nets."""

from __future__ import annotations

import math

import torch
from torch import nn


def positional_encode(seq_len: int, d: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal table: entry(pos, 2i) = sin(pos / 10000^(2i/d)), entry(pos, 2i+1) = cos(same)."""
    if seq_len <= 0 or d <= 0:
        raise ValueError("seq_len and d must be positive")
    pos = torch.arange(seq_len, dtype=torch.float64)[:, None]
    two_i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, two_i / d)
    pe = torch.zeros(seq_len, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None,
              return_weights: bool = False):
    """softmax(q kᵀ / √d_k) v with masked key columns set to -inf before the softmax.

    ``mask`` is True for valid keys and broadcasts against (..., n_q, n_k); a (..., n_k) key mask
    is expanded over queries.
    """
    d_k = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if mask is not None:
        if mask.dim() == logits.dim() - 1:
            mask = mask.unsqueeze(-2)
        if not bool(mask.any(-1).all()):
            raise ValueError("empty attention context")
        logits = logits.masked_fill(~mask, float("-inf"))
    w = torch.softmax(logits, dim=-1)
    out = w @ v
    return (out, w) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, h: int):
        super().__init__()
        if d % h:
            raise ValueError("model width must be divisible by the number of heads")
        self.d, self.h, self.d_k = d, h, d // h
        self.W_q = nn.Linear(d, d, bias=False)
        self.W_k = nn.Linear(d, d, bias=False)
        self.W_v = nn.Linear(d, d, bias=False)
        self.W_O = nn.Linear(d, d)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.h, self.d_k).transpose(1, 2)

    def forward(self, query: torch.Tensor, key: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        B, n, _ = query.shape
        q, k, v = self._split(self.W_q(query)), self._split(self.W_k(key)), self._split(self.W_v(key))
        m = None if mask is None else mask[:, None, None, :]
        out = attention(q, k, v, m)
        return self.W_O(out.transpose(1, 2).reshape(B, n, self.d))


class EncoderLayer(nn.Module):
    """Post-norm block: LN(Z + MultiHead(Z)) then LN(Z + FFN(Z))."""

    def __init__(self, d: int, h: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadAttention(d, h)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))
        self.norm2 = nn.LayerNorm(d)

    def forward(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        z = self.norm1(z + self.attn(z, z, mask))
        return self.norm2(z + self.ffn(z))


class Encoder(nn.Module):
    def __init__(self, d: int, h: int, n_layers: int, d_ff: int):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d, h, d_ff) for _ in range(n_layers))

    def forward(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        for layer in self.layers:
            z = layer(z, mask)
        return z


def mlp(d_in: int, hidden: tuple[int, ...], d_out: int) -> nn.Sequential:
    """tanh MLP; smooth everywhere so finite-difference checks hold at any parameter point."""
    mods: list[nn.Module] = []
    prev = d_in
    for width in hidden:
        mods += [nn.Linear(prev, width), nn.Tanh()]
        prev = width
    mods.append(nn.Linear(prev, d_out))
    return nn.Sequential(*mods)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over dim -2 of valid rows; rows with no valid entries give zeros."""
    m = mask.to(x.dtype).unsqueeze(-1)
    total = (x * m).sum(-2)
    count = m.sum(-2).clamp_min(1.0)
    return total / count
