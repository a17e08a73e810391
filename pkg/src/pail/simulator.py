"""Conditional VAE world model predicting the next state from (state, action); frozen after pretraining."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .layers import mlp
from .policy import LOG_VAR_MAX, LOG_VAR_MIN

log = logging.getLogger(__name__)


class SimulatorFrozenError(RuntimeError):
    pass


class CriterionNotReached(RuntimeError):
    def __init__(self, best_mse: float, criterion: float):
        super().__init__(f"validation MSE {best_mse:.5f} did not reach criterion {criterion}")
        self.best_mse = best_mse


@dataclass
class SimulatorConfig:
    d_s: int
    K: int
    d_z: int = 8
    hidden: int = 128
    beta_vae: float = 1e-3
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    criterion: float = 0.1
    val_fraction: float = 0.1


def kl_standard_normal(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag exp(log_var)) || N(0, I)) per row."""
    return 0.5 * (mu**2 + log_var.exp() - log_var - 1.0).sum(-1)


class WorldModel(nn.Module):
    def __init__(self, cfg: SimulatorConfig):
        super().__init__()
        self.cfg = cfg
        d_in = cfg.d_s + cfg.K
        self.enc = mlp(d_in, (cfg.hidden, cfg.hidden), 2 * cfg.d_z) if cfg.d_z > 0 else None
        self.dec = mlp(d_in + cfg.d_z, (cfg.hidden, cfg.hidden), cfg.d_s)
        self.frozen = False
        self.val_mse = float("nan")

    def encode(self, s: torch.Tensor, a: torch.Tensor):
        if self.enc is None:
            empty = s.new_zeros(s.shape[:-1] + (0,))
            return empty, empty
        mu, log_var = self.enc(torch.cat([s, a], -1)).split(self.cfg.d_z, dim=-1)
        return mu, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    def decode(self, s: torch.Tensor, a: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return s + self.dec(torch.cat([s, a, z], -1))

    def elbo_loss(self, s, a, s_next, generator: torch.Generator | None = None, eps=None) -> torch.Tensor:
        """MSE reconstruction + beta_vae * KL(q(z|s,a) || N(0, I)); minimized."""
        mu, log_var = self.encode(s, a)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + (0.5 * log_var).exp() * eps
        recon = ((self.decode(s, a, z) - s_next) ** 2).mean()
        if self.cfg.d_z == 0 or self.cfg.beta_vae == 0:
            return recon
        return recon + self.cfg.beta_vae * kl_standard_normal(mu, log_var).mean()

    def predict(self, s: torch.Tensor, a: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        z = torch.randn(s.shape[:-1] + (self.cfg.d_z,), generator=generator, dtype=s.dtype)
        return self.decode(s, a, z)

    @torch.no_grad()
    def simulate_step(self, s: torch.Tensor, a: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Next state with z drawn from the prior."""
        if not self.frozen:
            raise SimulatorFrozenError("simulator not frozen")
        return self.predict(s, a, generator)

    def freeze(self) -> "WorldModel":
        self.frozen = True
        self.requires_grad_(False)
        self.eval()
        return self


def transition_triples(states: np.ndarray, actions: np.ndarray, valid: np.ndarray):
    """(s_t, a_t, s_{t+1}) for every consecutive pair of valid steps."""
    pair = valid[:, :-1] & valid[:, 1:]
    return states[:, :-1][pair], actions[:, :-1][pair], states[:, 1:][pair]


@torch.no_grad()
def prediction_mse(model: WorldModel, s, a, s_next, seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    return float(((model.predict(s, a, g) - s_next) ** 2).mean())


def pretrain(model: WorldModel, triples, seed: int = 0, stop_at_criterion: bool = False) -> WorldModel:
    """Adam on the ELBO with early stopping on validation MSE; freezes the best parameters.

    Raises CriterionNotReached when the best validation MSE stays above ``cfg.criterion``.
    """
    if model.frozen:
        raise SimulatorFrozenError("simulator frozen")
    cfg = model.cfg
    dtype = next(model.parameters()).dtype
    s, a, sn = (torch.as_tensor(x, dtype=dtype) for x in triples)
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(len(s), generator=g)
    n_val = max(1, int(round(cfg.val_fraction * len(s))))
    val, tr = perm[:n_val], perm[n_val:]
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    best, best_state, stale = float("inf"), copy.deepcopy(model.state_dict()), 0
    for epoch in range(cfg.max_epochs):
        order = tr[torch.randperm(len(tr), generator=g)]
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = model.elbo_loss(s[idx], a[idx], sn[idx], g)
            opt.zero_grad()
            loss.backward()
            opt.step()
        mse = prediction_mse(model, s[val], a[val], sn[val], seed)
        if mse < best - 1e-7:
            best, best_state, stale = mse, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
        if epoch % 20 == 0:
            log.info("sim epoch %d val_mse %.5f", epoch, mse)
        if stale >= cfg.patience or (stop_at_criterion and best <= cfg.criterion):
            break
    model.load_state_dict(best_state)
    model.val_mse = best
    if best > cfg.criterion:
        raise CriterionNotReached(best, cfg.criterion)
    return model.freeze()
