"""Sliding-window attention policy: history encoder, state-query cross-attention decoder, Gaussian head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import Encoder, MultiHeadAttention, positional_encode

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 4.0


@dataclass
class PolicyConfig:
    d_s: int
    K: int
    d: int = 64
    h: int = 4
    L: int = 2
    l: int = 8
    d_ff: int = 128
    deterministic: bool = False


@dataclass
class GaussianActionDistribution:
    """Diagonal Gaussian over the pre-softplus action vector."""

    mean: torch.Tensor
    log_var: torch.Tensor

    @property
    def diag_var(self) -> torch.Tensor:
        return self.log_var.exp()

    @property
    def std(self) -> torch.Tensor:
        return (0.5 * self.log_var).exp()


def sample_action(dist: GaussianActionDistribution, generator: torch.Generator | None = None,
                  deterministic: bool = False, eps: torch.Tensor | None = None):
    """Reparameterized draw. Returns (action, raw, eps) with action = softplus(raw) ≥ 0.

    Passing ``eps`` replays a previous draw so gradients can be recomputed later.
    """
    if deterministic:
        eps = torch.zeros_like(dist.mean)
        raw = dist.mean
    else:
        if eps is None:
            eps = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
        raw = dist.mean + dist.std * eps
    return F.softplus(raw), raw, eps


def log_prob(dist: GaussianActionDistribution, raw: torch.Tensor) -> torch.Tensor:
    var = dist.diag_var
    return -0.5 * (torch.log(2 * math.pi * var) + (raw - dist.mean) ** 2 / var).sum(-1)


def entropy(dist: GaussianActionDistribution) -> torch.Tensor:
    return 0.5 * torch.log(2 * math.pi * math.e * dist.diag_var).sum(-1)


def inverse_softplus(a: torch.Tensor, floor: float = 1e-4) -> torch.Tensor:
    """Map non-negative actions into the raw space; actions below ``floor`` are lifted to it."""
    a = a.clamp_min(floor)
    return a + torch.log(-torch.expm1(-a))


class PolicyNetwork(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.embed = nn.Linear(cfg.d_s + cfg.K, d)
        self.register_buffer("pe", positional_encode(cfg.l, d), persistent=False)
        self.encoder = Encoder(d, cfg.h, cfg.L, cfg.d_ff)
        self.state_proj = nn.Linear(cfg.d_s, d)
        self.cross = MultiHeadAttention(d, cfg.h)
        self.dec_norm1 = nn.LayerNorm(d)
        self.dec_ffn = nn.Sequential(nn.Linear(d, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, d))
        self.dec_norm2 = nn.LayerNorm(d)
        self.head = nn.Linear(d, 2 * cfg.K)

    def embed_steps(self, hs: torch.Tensor, ha: torch.Tensor) -> torch.Tensor:
        return self.embed(torch.cat([hs, ha], dim=-1))

    @staticmethod
    def _attendable(mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Rows with an empty window (the first step) attend over their zero padding instead; the
        decoder then drops the history term for them, so the action depends on the state alone."""
        has_history = mask.any(-1)
        return mask | ~has_history[:, None], has_history

    def encode_history(self, hs: torch.Tensor, ha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, l, d_s), (B, l, K), (B, l) -> Z^L of shape (B, l, d)."""
        z = self.embed_steps(hs, ha) + self.pe.to(hs.dtype)
        return self.encoder(z, self._attendable(mask)[0])

    def decode(self, z: torch.Tensor, mask: torch.Tensor, s: torch.Tensor) -> GaussianActionDistribution:
        q = self.state_proj(s).unsqueeze(1)
        attendable, has_history = self._attendable(mask)
        context = self.cross(q, z, attendable) * has_history[:, None, None].to(q.dtype)
        x = self.dec_norm1(q + context)
        x = self.dec_norm2(x + self.dec_ffn(x)).squeeze(1)
        out = self.head(x)
        mu, log_var = out.split(self.cfg.K, dim=-1)
        return GaussianActionDistribution(mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def forward(self, hs: torch.Tensor, ha: torch.Tensor, mask: torch.Tensor,
                s: torch.Tensor) -> GaussianActionDistribution:
        return self.decode(self.encode_history(hs, ha, mask), mask, s)

    def act(self, hs, ha, mask, s, generator=None, greedy: bool = False):
        dist = self(hs, ha, mask, s)
        return sample_action(dist, generator, deterministic=greedy or self.cfg.deterministic) + (dist,)
