"""History-aware discriminator D(h, s, a) and the per-step reward it induces."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import masked_mean, mlp

CLIP = 1e-6


@dataclass
class DiscriminatorConfig:
    d_h: int  # width of the pooled history vector (policy embedding width)
    d_s: int
    K: int
    hidden: tuple[int, ...] = (64, 64)
    use_history: bool = True
    reward_sign: str = "prose"  # "prose": r = log D; "literal": r = -log D


@dataclass
class TupleBatch:
    pooled_history: torch.Tensor
    states: torch.Tensor
    actions: torch.Tensor

    def __post_init__(self) -> None:
        if not (len(self.pooled_history) == len(self.states) == len(self.actions)):
            raise ValueError("tuple batch fields must have equal length")

    def __len__(self) -> int:
        return len(self.states)


def pool_history(embedded: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Average of embedded valid window entries; a fully padded window gives zeros."""
    return masked_mean(embedded, mask)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.net = mlp(cfg.d_h + cfg.d_s + cfg.K, tuple(cfg.hidden), 1)

    def logit(self, h: torch.Tensor, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_history:
            h = torch.zeros_like(h)
        return self.net(torch.cat([h, s, a], -1)).squeeze(-1)

    def forward(self, h: torch.Tensor, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(h, s, a)).clamp(CLIP, 1.0 - CLIP)

    def batch(self, b: TupleBatch) -> torch.Tensor:
        return self(b.pooled_history, b.states, b.actions)

    def reward(self, h: torch.Tensor, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        r = torch.log(self(h, s, a))
        return -r if self.cfg.reward_sign == "literal" else r


def discriminator_loss(disc: Discriminator, expert: TupleBatch, generated: TupleBatch) -> torch.Tensor:
    """-E_expert[log D] - E_generated[log(1 - D)]."""
    if len(expert) == 0 or len(generated) == 0:
        raise ValueError("discriminator loss needs nonempty expert and generated batches")
    return -torch.log(disc.batch(expert)).mean() - torch.log(1.0 - disc.batch(generated)).mean()


def generator_adv_loss(disc: Discriminator, generated: TupleBatch) -> torch.Tensor:
    """E_generated[log(1 - D)], minimized by the policy; 0 for an empty batch."""
    if len(generated) == 0:
        return torch.zeros((), dtype=generated.states.dtype)
    return torch.log(1.0 - disc.batch(generated)).mean()


@torch.no_grad()
def accuracy(disc: Discriminator, expert: TupleBatch, generated: TupleBatch) -> float:
    correct = (disc.batch(expert) > 0.5).sum() + (disc.batch(generated) <= 0.5).sum()
    return float(correct) / (len(expert) + len(generated))
