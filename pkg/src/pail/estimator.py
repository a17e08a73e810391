"""Performance estimator: trajectory value net F, Q / target-Q credit networks and TD machinery."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import Encoder, masked_mean, mlp, positional_encode

log = logging.getLogger(__name__)


@dataclass
class ValueNetConfig:
    d_s: int
    K: int
    T: int
    d: int = 64
    h: int = 4
    L: int = 2
    d_ff: int = 128
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    val_fraction: float = 0.1


@dataclass
class QNetConfig:
    d_s: int
    K: int
    hidden: tuple[int, ...] = (128, 128)


class ValueNetwork(nn.Module):
    """Self-attention regressor V(τ) over a full masked step sequence."""

    def __init__(self, cfg: ValueNetConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.d_s + cfg.K, cfg.d)
        self.register_buffer("pe", positional_encode(cfg.T, cfg.d), persistent=False)
        self.encoder = Encoder(cfg.d, cfg.h, cfg.L, cfg.d_ff)
        self.head = nn.Linear(cfg.d, 1)
        # output affine in label units; identity until pretraining sets it
        self.register_buffer("y_mean", torch.zeros(()))
        self.register_buffer("y_scale", torch.ones(()))
        self.frozen = False

    def embed_steps(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return self.embed(torch.cat([states, actions], -1))

    def forward_embedded(self, e: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        z = self.encoder(e + self.pe[: e.shape[1]].to(e.dtype), valid)
        return self.y_mean + self.y_scale * self.head(masked_mean(z, valid)).squeeze(-1)

    def forward(self, states: torch.Tensor, actions: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.forward_embedded(self.embed_steps(states, actions), valid)

    def freeze(self) -> "ValueNetwork":
        self.frozen = True
        self.requires_grad_(False)
        self.eval()
        return self


def r_squared(pred: np.ndarray, y: np.ndarray) -> float:
    return float(1.0 - ((pred - y) ** 2).sum() / ((y - y.mean()) ** 2).sum())


def pretrain_value_net(model: ValueNetwork, states, actions, valid, sdg, seed: int = 0,
                       freeze: bool = True) -> ValueNetwork:
    """Minimize (V(τ) - y)² with Adam; keeps the parameters that score best on a validation slice."""
    cfg = model.cfg
    dtype = model.head.weight.dtype
    S = torch.as_tensor(states, dtype=dtype)
    A = torch.as_tensor(actions, dtype=dtype)
    M = torch.as_tensor(valid, dtype=torch.bool)
    y = torch.as_tensor(sdg, dtype=dtype)
    with torch.no_grad():
        model.y_mean.fill_(float(y.mean()))
        model.y_scale.fill_(max(float(y.std()), 1e-6) if len(y) > 1 else 1.0)
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(y), generator=g)
    n_val = int(round(cfg.val_fraction * len(y))) if len(y) >= 10 else 0
    val, tr = perm[:n_val], perm[n_val:]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best, best_state = float("inf"), copy.deepcopy(model.state_dict())
    scale = model.y_scale
    for epoch in range(cfg.epochs):
        order = tr[torch.randperm(len(tr), generator=g)]
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            # squared error measured in label-std units for a well-conditioned step size
            loss = (((model(S[idx], A[idx], M[idx]) - y[idx]) / scale) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        if n_val:
            with torch.no_grad():
                mse = float(((model(S[val], A[val], M[val]) - y[val]) ** 2).mean())
            if mse < best:
                best, best_state = mse, copy.deepcopy(model.state_dict())
            if epoch % 10 == 0:
                log.info("value epoch %d val_mse %.4f", epoch, mse)
    if n_val:
        model.load_state_dict(best_state)
    return model.freeze() if freeze else model


class QNetwork(nn.Module):
    """Q(s, a) = offset + scale * MLP(s ‖ a); offset/scale put the output in SDG units."""

    def __init__(self, cfg: QNetConfig):
        super().__init__()
        self.cfg = cfg
        self.net = mlp(cfg.d_s + cfg.K, tuple(cfg.hidden), 1)
        self.register_buffer("offset", torch.zeros(()))
        self.register_buffer("scale", torch.ones(()))

    def forward(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.offset + self.scale * self.net(torch.cat([s, a], -1)).squeeze(-1)


def td_error(r, gamma, q_next_target, q_current):
    """δ_t = r_t + γ Q'(s_{t+1}, a_{t+1}) - Q(s_t, a_t)."""
    return r + gamma * q_next_target - q_current


def terminal_td_error(v_tau, q_terminal):
    """δ_T = V(τ) - Q(s_T, a_T): the last step is grounded on the trajectory value."""
    return v_tau - q_terminal


def target_action(mean: torch.Tensor, noise_scale: float, clip: float,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """softplus(μ + clip(N(0, noise_scale²), ±clip)), the smoothed action fed to Q'."""
    if noise_scale == 0 or clip == 0:
        return F.softplus(mean)
    noise = noise_scale * torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return F.softplus(mean + noise.clamp(-clip, clip))


@torch.no_grad()
def td_targets(q_target: QNetwork, rewards: torch.Tensor, next_states: torch.Tensor,
               next_actions: torch.Tensor, v_tau: torch.Tensor, gamma: float) -> torch.Tensor:
    """Regression targets for steps t_s..T-1 laid out as (B, n).

    ``next_states``/``next_actions`` are (B, n-1, ·) for steps t_s+1..T-1; the final column is V(τ).
    """
    boot = rewards[:, :-1] + gamma * q_target(next_states, next_actions)
    return torch.cat([boot, v_tau[:, None]], dim=1)


def q_update(q_net: QNetwork, states: torch.Tensor, actions: torch.Tensor, targets: torch.Tensor,
             lr: float = 1e-3, optimizer: torch.optim.Optimizer | None = None) -> float:
    """One gradient step on mean δ² with targets held constant. Returns the pre-step loss."""
    delta = targets.detach() - q_net(states, actions)
    loss = (delta**2).mean()
    q_net.zero_grad(set_to_none=False)
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    else:
        with torch.no_grad():
            for p in q_net.parameters():
                if p.grad is not None:
                    p.sub_(lr * p.grad)
    return float(loss.detach())


@torch.no_grad()
def soft_update(target: nn.Module, source: nn.Module, eps: float) -> nn.Module:
    """θ' ← ε θ + (1 - ε) θ' elementwise over parameters (buffers are copied)."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("soft update rate must lie in (0, 1]")
    tp, sp = list(target.parameters()), list(source.parameters())
    if len(tp) != len(sp) or any(a.shape != b.shape for a, b in zip(tp, sp)):
        raise ValueError("target and source parameter shapes differ")
    for pt, ps in zip(tp, sp):
        pt.lerp_(ps, eps)
    for bt, bs in zip(target.buffers(), source.buffers()):
        bt.copy_(bs)
    return target


def value_loss(q_net: QNetwork, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """-E[Q(s, a)] for reparameterized policy actions; 0 for an empty batch."""
    if len(states) == 0:
        return torch.zeros((), dtype=states.dtype)
    return -q_net(states, actions).mean()
