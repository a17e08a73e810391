"""Adversarial imitation + Q-credit training loop over simulator rollouts."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .discriminator import (Discriminator, DiscriminatorConfig, TupleBatch, accuracy, discriminator_loss,
                            generator_adv_loss, pool_history)
from .estimator import QNetConfig, QNetwork, ValueNetwork, q_update, soft_update, target_action, td_targets, value_loss
from .policy import PolicyConfig, PolicyNetwork, entropy, sample_action
from .simulator import SimulatorFrozenError, WorldModel

log = logging.getLogger(__name__)

METRIC_KEYS = ("disc_loss", "disc_acc", "mean_reward", "mean_td_sq", "mean_q", "policy_loss", "beta", "entropy")
ABLATIONS = {
    "pail-g": "deterministic_head",
    "pail-h": "no_history_discriminator",
    "pail-p": "no_performance_estimator",
}


@dataclass
class TrainConfig:
    t_s: int = 9
    lam: float = 0.5
    # a larger entropy bonus and slower policy and discriminator steps delay the late collapse of the
    # adversarial game; 185 epochs sits inside the window where imitation has converged but not overshot
    beta0: float = 0.1
    k: float = 0.05
    epochs: int = 185
    batch_size: int = 64
    lr_policy: float = 1e-4
    lr_disc: float = 3e-4
    lr_q: float = 1e-3
    gamma: float = 0.99
    soft_eps: float = 0.01
    n_td: int = 20
    disc_steps: int = 1
    target_noise: float = 0.2
    target_clip: float = 0.5
    reward_sign: str = "prose"
    checkpoint_every: int = 25
    seed: int = 0
    # architecture
    d: int = 64
    h: int = 4
    L: int = 2
    l: int = 8
    d_ff: int = 128
    disc_hidden: list[int] = field(default_factory=lambda: [64, 64])
    q_hidden: list[int] = field(default_factory=lambda: [128, 128])
    # ablations
    deterministic_head: bool = False
    no_history_discriminator: bool = False
    no_performance_estimator: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.t_s < 0:
            raise ValueError("t_s must be >= 0")
        if self.beta0 < 0 or self.k < 0:
            raise ValueError("beta0 and k must be >= 0")

    @property
    def effective_lam(self) -> float:
        return 1.0 if self.no_performance_estimator else self.lam

    def with_ablation(self, name: str | None) -> "TrainConfig":
        cfg = copy.deepcopy(self)
        if name:
            if name not in ABLATIONS:
                raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
            setattr(cfg, ABLATIONS[name], True)
        return cfg


def beta_schedule(beta0: float, k: float, epoch: float) -> float:
    """β₀·exp(-k·epoch)."""
    if beta0 < 0 or k < 0:
        raise ValueError("beta0 and k must be >= 0")
    return beta0 * math.exp(-k * epoch)


def windows(S: torch.Tensor, A: torch.Tensor, V: torch.Tensor, t: int, l: int):
    """Batched history window ending at t-1: (B, l, d_s), (B, l, K), (B, l) mask."""
    B = S.shape[0]
    hs = S.new_zeros(B, l, S.shape[2])
    ha = A.new_zeros(B, l, A.shape[2])
    mask = torch.zeros(B, l, dtype=torch.bool)
    lo = max(0, t - l)
    n = t - lo
    if n:
        m = V[:, lo:t]
        hs[:, l - n:] = S[:, lo:t] * m[..., None]
        ha[:, l - n:] = A[:, lo:t] * m[..., None]
        mask[:, l - n:] = m
    return hs, ha, mask


def stacked_windows(S, A, V, ts, l):
    """Windows for every t in ``ts`` flattened to (B·len(ts), ·) in (batch, time) order."""
    parts = [windows(S, A, V, t, l) for t in ts]
    hs = torch.stack([p[0] for p in parts], 1).flatten(0, 1)
    ha = torch.stack([p[1] for p in parts], 1).flatten(0, 1)
    m = torch.stack([p[2] for p in parts], 1).flatten(0, 1)
    return hs, ha, m


@dataclass
class Rollout:
    states: torch.Tensor  # (B, T, d_s)
    actions: torch.Tensor  # (B, T, K)
    valid: torch.Tensor  # (B, T)
    t_s: int
    mean: torch.Tensor  # (B, n_gen, K) pre-softplus means for steps t_s..T-1
    log_var: torch.Tensor
    eps: torch.Tensor

    @property
    def n_generated(self) -> int:
        return self.states.shape[1] - self.t_s


@torch.no_grad()
def rollout(policy: PolicyNetwork, simulator: WorldModel, S: torch.Tensor, A: torch.Tensor, V: torch.Tensor,
            t_s: int, generator: torch.Generator | None = None, greedy: bool = False) -> Rollout:
    """Replace actions from t_s onward with policy actions; successor states come from the simulator."""
    if not simulator.frozen:
        raise SimulatorFrozenError("simulator not frozen")
    S, A = S.clone(), A.clone()
    B, T, K = A.shape
    means, log_vars, epss = [], [], []
    det = greedy or policy.cfg.deterministic
    for t in range(t_s, T):
        hs, ha, m = windows(S, A, V, t, policy.cfg.l)
        dist = policy(hs, ha, m, S[:, t])
        a, _, eps = sample_action(dist, generator, deterministic=det)
        vt = V[:, t, None].to(a.dtype)
        A[:, t] = a * vt
        means.append(dist.mean)
        log_vars.append(dist.log_var)
        epss.append(eps)
        if t + 1 < T:
            nxt = simulator.simulate_step(S[:, t], A[:, t], generator)
            S[:, t + 1] = nxt * V[:, t + 1, None].to(nxt.dtype)
    empty = A.new_zeros(B, 0, K)
    stack = lambda xs: torch.stack(xs, 1) if xs else empty  # noqa: E731
    return Rollout(S, A, V, t_s, stack(means), stack(log_vars), stack(epss))


class Trainer:
    """Owns every trainable component plus the frozen simulator and value net."""

    def __init__(self, cfg: TrainConfig, simulator: WorldModel, value_net: ValueNetwork, data: dict[str, torch.Tensor]):
        if not simulator.frozen:
            raise SimulatorFrozenError("simulator not frozen")
        self.cfg = cfg
        self.sim = simulator
        self.F = value_net
        self.data = data
        d_s, K = data["train_S"].shape[2], data["train_A"].shape[2]
        torch.manual_seed(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.policy = PolicyNetwork(PolicyConfig(d_s, K, cfg.d, cfg.h, cfg.L, cfg.l, cfg.d_ff, cfg.deterministic_head))
        self.disc = Discriminator(DiscriminatorConfig(cfg.d, d_s, K, tuple(cfg.disc_hidden),
                                                      not cfg.no_history_discriminator, cfg.reward_sign))
        self.q = QNetwork(QNetConfig(d_s, K, tuple(cfg.q_hidden)))
        with torch.no_grad():
            self.q.offset.copy_(value_net.y_mean)
            self.q.scale.copy_(value_net.y_scale)
        self.q_target = copy.deepcopy(self.q).requires_grad_(False)
        self.opt_policy = torch.optim.Adam(self.policy.parameters(), lr=cfg.lr_policy)
        self.opt_disc = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_disc)
        self.opt_q = torch.optim.Adam(self.q.parameters(), lr=cfg.lr_q)
        self.epoch = 0

    # --- tuple construction ----------------------------------------------------------------

    def _tuples(self, S, A, V, t_s, actions=None) -> tuple[TupleBatch, tuple]:
        T = S.shape[1]
        ts = range(t_s, T)
        hs, ha, m = stacked_windows(S, A, V, ts, self.cfg.l)
        with torch.no_grad():
            pooled = pool_history(self.policy.embed_steps(hs, ha), m)
        s = S[:, t_s:].flatten(0, 1)
        a = A[:, t_s:].flatten(0, 1) if actions is None else actions
        keep = V[:, t_s:].flatten()
        return TupleBatch(pooled[keep], s[keep], a[keep]), (hs, ha, m, keep)

    def _sample(self, n: int, pool: int) -> torch.Tensor:
        return torch.randperm(pool, generator=self.gen)[: min(n, pool)]

    # --- one epoch -------------------------------------------------------------------------

    def train_epoch(self, epoch: int) -> dict:
        cfg, d = self.cfg, self.data
        t_s = cfg.t_s
        idx = self._sample(cfg.batch_size, len(d["train_S"]))
        roll = rollout(self.policy, self.sim, d["train_S"][idx], d["train_A"][idx], d["train_V"][idx], t_s, self.gen)
        eidx = self._sample(cfg.batch_size, len(d["expert_S"]))
        metrics = {"epoch": epoch, "beta": beta_schedule(cfg.beta0, cfg.k, epoch)}
        if roll.n_generated == 0:
            metrics.update(disc_loss=0.0, disc_acc=0.0, mean_reward=0.0, mean_td_sq=0.0, mean_q=0.0, policy_loss=0.0,
                           entropy=0.0)
            return metrics

        # (2) discriminator
        gen_batch, (hs, ha, m, keep) = self._tuples(roll.states, roll.actions, roll.valid, t_s)
        exp_batch, _ = self._tuples(d["expert_S"][eidx], d["expert_A"][eidx], d["expert_V"][eidx], t_s)
        metrics["disc_acc"] = accuracy(self.disc, exp_batch, gen_batch)
        disc_loss = 0.0
        for _ in range(cfg.disc_steps):
            loss = discriminator_loss(self.disc, exp_batch, gen_batch)
            self.opt_disc.zero_grad()
            loss.backward()
            self.opt_disc.step()
            disc_loss = float(loss.detach())
        metrics["disc_loss"] = disc_loss

        B, n = roll.states.shape[0], roll.n_generated
        with torch.no_grad():
            rewards = self.disc.reward(gen_batch.pooled_history, gen_batch.states, gen_batch.actions)
        metrics["mean_reward"] = float(rewards.mean())

        # (3) Q credit estimation grounded on the frozen trajectory value
        td_sq = mean_q = 0.0
        if not cfg.no_performance_estimator:
            r_full = torch.zeros(B * n, dtype=rewards.dtype)
            r_full[keep] = rewards
            r_full = r_full.view(B, n)
            with torch.no_grad():
                v_tau = self.F(roll.states, roll.actions, roll.valid)
            s_seq = roll.states[:, t_s:]
            a_seq = roll.actions[:, t_s:]
            w = roll.valid[:, t_s:]
            for _ in range(cfg.n_td):
                a_next = target_action(roll.mean[:, 1:], cfg.target_noise, cfg.target_clip, self.gen)
                y = td_targets(self.q_target, r_full, s_seq[:, 1:], a_next, v_tau, cfg.gamma)
                td_sq += q_update(self.q, s_seq[w], a_seq[w], y[w], optimizer=self.opt_q)
                soft_update(self.q_target, self.q, cfg.soft_eps)
            td_sq /= cfg.n_td
            with torch.no_grad():
                mean_q = float(self.q(s_seq[w], a_seq[w]).mean())
        metrics.update(mean_td_sq=td_sq, mean_q=mean_q)

        # (4) policy step on the combined objective
        loss, parts = self.policy_loss(roll, (hs, ha, m, keep), epoch)
        self.opt_policy.zero_grad()
        self.disc.zero_grad()
        self.q.zero_grad()
        loss.backward()
        self.opt_policy.step()
        metrics.update(policy_loss=float(loss.detach()), entropy=float(parts["entropy"].detach()))
        return metrics

    def policy_loss(self, roll: Rollout, cached=None, epoch: int = 0):
        """λ·L_IL + (1-λ)·L_value - β(epoch)·H; returns (loss, parts)."""
        cfg = self.cfg
        t_s = roll.t_s
        if cached is None:
            hs, ha, m = stacked_windows(roll.states, roll.actions, roll.valid, range(t_s, roll.states.shape[1]), cfg.l)
            keep = roll.valid[:, t_s:].flatten()
        else:
            hs, ha, m, keep = cached
        s = roll.states[:, t_s:].flatten(0, 1)
        dist = self.policy(hs[keep], ha[keep], m[keep], s[keep])
        a, _, _ = sample_action(dist, deterministic=cfg.deterministic_head, eps=roll.eps.flatten(0, 1)[keep])
        with torch.no_grad():
            pooled = pool_history(self.policy.embed_steps(hs[keep], ha[keep]), m[keep])
        batch = TupleBatch(pooled, s[keep], a)
        lam = cfg.effective_lam
        l_il = generator_adv_loss(self.disc, batch)
        # credit measured in label-std units so λ trades off commensurate terms
        l_val = value_loss(self.q, batch.states, a) / self.q.scale if lam < 1.0 else torch.zeros(())
        h = entropy(dist).mean()
        beta = beta_schedule(cfg.beta0, cfg.k, epoch)
        loss = lam * l_il + (1.0 - lam) * l_val - beta * h
        return loss, {"l_il": l_il, "l_value": l_val, "entropy": h}

    # --- persistence -----------------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "policy": copy.deepcopy(self.policy.state_dict()),
            "disc": copy.deepcopy(self.disc.state_dict()),
            "q": copy.deepcopy(self.q.state_dict()),
            "q_target": copy.deepcopy(self.q_target.state_dict()),
            "optim": {
                **ckpt.optimizer_tensors(self.opt_policy, "policy"),
                **ckpt.optimizer_tensors(self.opt_disc, "disc"),
                **ckpt.optimizer_tensors(self.opt_q, "q"),
            },
            "rng": self.gen.get_state().clone(),
            "epoch": self.epoch,
        }

    def write_snapshot(self, snap: dict, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pc = self.policy.cfg
        header = {"d": pc.d, "h": pc.h, "L": pc.L, "l": pc.l, "K": pc.K, "d_s": pc.d_s, "epoch": snap["epoch"]}
        ckpt.save_tensors(out / "policy.ckpt", snap["policy"], {**header, "d_ff": pc.d_ff,
                                                              "deterministic": pc.deterministic})
        ckpt.save_tensors(out / "disc.ckpt", snap["disc"], header)
        ckpt.save_tensors(out / "q.ckpt", snap["q"], header)
        ckpt.save_tensors(out / "q_target.ckpt", snap["q_target"], header)
        ckpt.save_tensors(out / "optim.ckpt", snap["optim"], header)
        (out / "rng.bin").write_bytes(bytes(snap["rng"].numpy().tobytes()))
        with open(out / "config.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self.cfg), fh, indent=1, sort_keys=True)
        with open(out / "state.json", "w", encoding="utf-8") as fh:
            json.dump({"epoch": snap["epoch"]}, fh)

    def save(self, out_dir: str | Path) -> None:
        self.write_snapshot(self.snapshot(), out_dir)

    def load(self, in_dir: str | Path) -> None:
        d = Path(in_dir)
        ckpt.load_module(d / "policy.ckpt", self.policy)
        ckpt.load_module(d / "disc.ckpt", self.disc)
        ckpt.load_module(d / "q.ckpt", self.q)
        ckpt.load_module(d / "q_target.ckpt", self.q_target)
        tensors, _ = ckpt.load_tensors(d / "optim.ckpt")
        ckpt.load_optimizer(self.opt_policy, tensors, "policy")
        ckpt.load_optimizer(self.opt_disc, tensors, "disc")
        ckpt.load_optimizer(self.opt_q, tensors, "q")
        self.gen.set_state(torch.frombuffer(bytearray((d / "rng.bin").read_bytes()), dtype=torch.uint8).clone())
        with open(d / "state.json", encoding="utf-8") as fh:
            self.epoch = int(json.load(fh)["epoch"])

    # --- driver ----------------------------------------------------------------------------

    def train(self, out_dir: str | Path | None = None, resume: bool = False, epochs: int | None = None,
              callback=None) -> list[dict]:
        """Run epochs up to ``cfg.epochs``; writes metrics.jsonl / timing.jsonl and checkpoints."""
        cfg = self.cfg
        total = cfg.epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir is not None else None
        history: list[dict] = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            metrics_path = out / "metrics.jsonl"
            if resume:
                self.load(out)
                lines = metrics_path.read_text().splitlines()[: self.epoch] if metrics_path.exists() else []
                metrics_path.write_text("".join(line + "\n" for line in lines))
                history = [json.loads(line) for line in lines]
            else:
                metrics_path.write_text("")
                (out / "timing.jsonl").write_text("")
                self.save(out)
        last_good = self.snapshot()
        try:
            while self.epoch < total:
                t0 = time.perf_counter()
                m = self.train_epoch(self.epoch)
                self.epoch += 1
                history.append(m)
                last_good = self.snapshot()
                if out is not None:
                    with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                        fh.write(json.dumps(m, sort_keys=True) + "\n")
                    with open(out / "timing.jsonl", "a", encoding="utf-8") as fh:
                        fh.write(json.dumps({"epoch": m["epoch"], "seconds": time.perf_counter() - t0}) + "\n")
                    if self.epoch % max(1, cfg.checkpoint_every) == 0:
                        self.write_snapshot(last_good, out)
                if callback is not None:
                    callback(self, m)
                if self.epoch % 10 == 0:
                    log.info("epoch %d %s", self.epoch, {k: round(v, 4) for k, v in m.items() if k != "epoch"})
        except BaseException:
            if out is not None:
                self.write_snapshot(last_good, out)
            raise
        if out is not None:
            self.write_snapshot(last_good, out)
        return history


def tensors_from_split(split, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack a normalized DatasetSplit into the tensor dict consumed by Trainer and the evaluators."""
    from .trajectory import to_arrays

    out = {}
    for name in ("expert", "train", "test"):
        S, A, V, y = to_arrays(getattr(split, name))
        out[f"{name}_S"] = torch.as_tensor(S, dtype=dtype)
        out[f"{name}_A"] = torch.as_tensor(A, dtype=dtype)
        out[f"{name}_V"] = torch.as_tensor(V, dtype=torch.bool)
        out[f"{name}_y"] = torch.as_tensor(np.nan_to_num(y), dtype=dtype)
    return out
