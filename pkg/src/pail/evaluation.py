"""Policy evaluation: improvement ratio, doubly robust OPE, KL to expert fits, diversity, transition F1,
behavior-cloning reference and time-step importance heatmap."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .estimator import QNetwork, ValueNetwork
from .policy import PolicyConfig, PolicyNetwork, entropy, inverse_softplus, log_prob, sample_action
from .simulator import WorldModel
from .trainer import rollout, stacked_windows

EPS_DIV = 1e-6


@dataclass
class EvalReport:
    improvement_ratio: float
    dr_value: float
    direct_value: float
    kl_divergence: float
    diversity: float
    f1: float
    n_trajectories: int

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EvalConfig:
    t_s: int = 9
    gamma: float = 0.99
    w_max: float = 10.0
    n_value_samples: int = 8
    seed: int = 1234
    greedy: bool = True


# --- improvement ratio ---------------------------------------------------------------------


def ratio_from_values(v_before: np.ndarray, v_after: np.ndarray) -> float:
    return float(np.mean((v_after - v_before) / np.maximum(np.abs(v_before), EPS_DIV)))


@torch.no_grad()
def policy_rollout(policy: PolicyNetwork, simulator: WorldModel, S, A, V, cfg: EvalConfig):
    g = torch.Generator().manual_seed(cfg.seed)
    return rollout(policy, simulator, S, A, V, cfg.t_s, g, greedy=cfg.greedy)


@torch.no_grad()
def improvement_ratio(F: ValueNetwork, policy: PolicyNetwork, simulator: WorldModel, S, A, V,
                      cfg: EvalConfig, roll=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean relative change in predicted SDG when actions from t_s on are replaced by the policy.

    Returns (ratio, v_before, v_after).
    """
    roll = roll or policy_rollout(policy, simulator, S, A, V, cfg)
    v_before = F(S, A, V).double().numpy()
    v_after = F(roll.states, roll.actions, roll.valid).double().numpy()
    return ratio_from_values(v_before, v_after), v_before, v_after


# --- doubly robust -------------------------------------------------------------------------


def doubly_robust(rewards, q_hat, v_hat, ratios, gamma: float = 1.0, w_max: float = 10.0,
                  sample_weight=None) -> float:
    """Step-wise recursive DR estimate averaged over trajectories.

    All inputs are (n, H): V_DR(t) = v̂_t + w_t (r_t + γ V_DR(t+1) - q̂_t), V_DR(H) = 0,
    with w_t = clip(ratio_t, 0, w_max). ``sample_weight`` weights trajectories (defaults uniform).
    """
    rewards, q_hat, v_hat = (np.asarray(x, dtype=np.float64) for x in (rewards, q_hat, v_hat))
    w = np.clip(np.nan_to_num(np.asarray(ratios, dtype=np.float64), nan=w_max, posinf=w_max), 0.0, w_max)
    v = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        v = v_hat[:, t] + w[:, t] * (rewards[:, t] + gamma * v - q_hat[:, t])
    if sample_weight is None:
        return float(v.mean())
    sw = np.asarray(sample_weight, dtype=np.float64)
    return float((sw * v).sum() / sw.sum())


@torch.no_grad()
def dr_estimate(policy: PolicyNetwork, behavior: PolicyNetwork, q_net: QNetwork | None, S, A, V, sdg,
                cfg: EvalConfig) -> tuple[float, float]:
    """DR value of ``policy`` on logged test trajectories from t_s; returns (dr_value, direct_value).

    Rewards are terminal-only (the SDG label on the last valid step). Density ratios are taken in
    the pre-softplus space, where the change of variables cancels.
    """
    B, T, _ = A.shape
    ts = range(cfg.t_s, T)
    n = len(ts)
    if n == 0:
        return 0.0, 0.0
    hs, ha, m = stacked_windows(S, A, V, ts, policy.cfg.l)
    s = S[:, cfg.t_s:].flatten(0, 1)
    a = A[:, cfg.t_s:].flatten(0, 1)
    raw = inverse_softplus(a)
    d_e = policy(hs, ha, m, s)
    d_b = behavior(hs, ha, m, s)
    log_ratio = (log_prob(d_e, raw) - log_prob(d_b, raw)).double()
    ratios = torch.exp(log_ratio.clamp(max=math.log(cfg.w_max) + 1.0)).view(B, n).numpy()
    if q_net is None:
        # no credit model: the recursion reduces to step-wise weighted importance sampling
        q_hat = v_hat = np.zeros((B, n))
    else:
        q_hat = q_net(s, a).double().view(B, n).numpy()
        g = torch.Generator().manual_seed(cfg.seed)
        v_acc = torch.zeros(B * n, dtype=torch.float64)
        for _ in range(cfg.n_value_samples):
            a_pi, _, _ = sample_action(d_e, g)
            v_acc += q_net(s, a_pi).double()
        v_hat = (v_acc / cfg.n_value_samples).view(B, n).numpy()
    valid = V[:, cfg.t_s:].numpy()
    rewards = np.zeros((B, n))
    last = np.where(valid.any(1), valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1), 0)
    rewards[np.arange(B), last] = np.asarray(sdg, dtype=np.float64)
    # padded steps contribute nothing
    q_hat, v_hat, ratios = q_hat * valid, v_hat * valid, np.where(valid, ratios, 0.0)
    dr = doubly_robust(rewards, q_hat, v_hat, ratios, cfg.gamma, cfg.w_max)
    return dr, float(v_hat[:, 0].mean())


# --- KL to expert fits ---------------------------------------------------------------------


def gaussian_kl(mu_p, var_p, mu_q, var_q):
    """KL(N(mu_p, diag var_p) || N(mu_q, diag var_q)) summed over the last axis."""
    return 0.5 * (np.log(var_q / var_p) + (var_p + (mu_p - mu_q) ** 2) / var_q - 1.0).sum(-1)


def fit_expert_gaussians(A: torch.Tensor, V: torch.Tensor, t_s: int, var_floor: float = math.exp(-10)):
    """Per-step diagonal Gaussian over expert actions mapped to the raw space; None where < 2 samples."""
    fits = {}
    raw = inverse_softplus(A.double())
    for t in range(t_s, A.shape[1]):
        rows = raw[V[:, t], t]
        if len(rows) < 2:
            continue
        fits[t] = (rows.mean(0).numpy(), np.maximum(rows.var(0, unbiased=False).numpy(), var_floor))
    return fits


@torch.no_grad()
def kl_metric(policy: PolicyNetwork, S, A, V, t_s: int) -> float:
    """Mean over expert states (t ≥ t_s) of KL(π(·|h, s) || per-step expert fit)."""
    fits = fit_expert_gaussians(A, V, t_s)
    if not fits:
        raise ValueError("no time step has two or more expert actions")
    total, count = 0.0, 0
    for t, (mu_q, var_q) in fits.items():
        hs, ha, m = stacked_windows(S, A, V, [t], policy.cfg.l)
        keep = V[:, t]
        dist = policy(hs[keep], ha[keep], m[keep], S[keep, t])
        kl = gaussian_kl(dist.mean.double().numpy(), dist.diag_var.double().numpy(), mu_q, var_q)
        total += float(kl.sum())
        count += len(kl)
    return total / count


# --- diversity and F1 ----------------------------------------------------------------------


def diversity_metric(action_seqs) -> float:
    """1 - mean pairwise cosine similarity of flattened action sequences, clipped to [0, 1]."""
    X = np.asarray(action_seqs, dtype=np.float64)
    if len(X) < 2:
        raise ValueError("diversity needs at least two rollouts")
    X = X.reshape(len(X), -1)
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = X / safe[:, None]
    C = U @ U.T
    C[(norms == 0)[:, None] | (norms == 0)[None, :]] = 0.0
    iu = np.triu_indices(len(X), k=1)
    return float(np.clip(1.0 - C[iu].mean(), 0.0, 1.0))


def f1_from_values(v_before, v_after) -> float:
    """Status = V ≥ median(V_before). TP = post-positive, FN = lost positives, FP = unconverted negatives."""
    v_before = np.asarray(v_before, dtype=np.float64)
    v_after = np.asarray(v_after, dtype=np.float64)
    thr = np.median(v_before)
    pre, post = v_before >= thr, v_after >= thr
    tp = int(post.sum())
    fn = int((pre & ~post).sum())
    fp = int((~pre & ~post).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


@torch.no_grad()
def f1_transition(F: ValueNetwork, policy: PolicyNetwork, simulator: WorldModel, S, A, V, cfg: EvalConfig,
                  roll=None) -> float:
    _, vb, va = improvement_ratio(F, policy, simulator, S, A, V, cfg, roll)
    return f1_from_values(vb, va)


# --- behavior cloning ----------------------------------------------------------------------


@dataclass
class BCConfig:
    epochs: int = 60
    batch_size: int = 256
    lr: float = 1e-3
    min_t: int = 1
    seed: int = 0


def bc_pairs(S, A, V, l: int, min_t: int = 1):
    """All (history, state, raw action) pairs for steps t ≥ min_t with a valid step."""
    T = S.shape[1]
    ts = range(min_t, T)
    hs, ha, m = stacked_windows(S, A, V, ts, l)
    s = S[:, min_t:].flatten(0, 1)
    a = A[:, min_t:].flatten(0, 1)
    keep = V[:, min_t:].flatten() & m.any(-1)
    return hs[keep], ha[keep], m[keep], s[keep], inverse_softplus(a[keep])


def bc_baseline(S, A, V, policy_cfg: PolicyConfig, cfg: BCConfig | None = None, history=None) -> PolicyNetwork:
    """Maximum-likelihood Gaussian policy with the windowed encoder architecture.

    ``history`` (a list), when given, receives the full-data negative log-likelihood after each epoch.
    """
    cfg = cfg or BCConfig()
    torch.manual_seed(cfg.seed)
    net = PolicyNetwork(copy.deepcopy(policy_cfg))
    hs, ha, m, s, raw = bc_pairs(S, A, V, policy_cfg.l, cfg.min_t)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    for _ in range(cfg.epochs):
        order = torch.randperm(len(s), generator=g)
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = -log_prob(net(hs[idx], ha[idx], m[idx], s[idx]), raw[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        if history is not None:
            with torch.no_grad():
                history.append(float(-log_prob(net(hs, ha, m, s), raw).mean()))
    return net


# --- importance heatmap --------------------------------------------------------------------


def cosine_rows(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    nx, ny = np.linalg.norm(x, axis=-1), np.linalg.norm(y, axis=-1)
    dot = (x * y).sum(-1)
    out = np.where((nx > 0) & (ny > 0), dot / np.where(nx * ny > 0, nx * ny, 1.0), 0.0)
    return np.where((nx == 0) & (ny == 0), 1.0, out)


def importance_heatmap(F: ValueNetwork, states, actions, valid, original_actions) -> np.ndarray:
    """Two rows over time steps: gradient×input saliency of V_F (max-normalized) and the cosine
    similarity between updated and original actions."""
    S = torch.as_tensor(states)[None]
    A = torch.as_tensor(actions)[None]
    M = torch.as_tensor(valid, dtype=torch.bool)[None]
    e = F.embed_steps(S, A).detach().requires_grad_(True)
    v = F.forward_embedded(e, M).sum()
    (grad,) = torch.autograd.grad(v, e)
    imp = (grad.norm(dim=-1) * e.detach().norm(dim=-1))[0].double().numpy()
    top = imp.max()
    imp = imp / top if top > 0 else imp
    sim = cosine_rows(np.asarray(actions, dtype=np.float64), np.asarray(original_actions, dtype=np.float64))
    return np.stack([imp, sim])


def write_heatmap(path: str | Path, matrix: np.ndarray) -> None:
    np.savetxt(path, matrix, delimiter="\t", fmt="%.10g")


# --- full report ---------------------------------------------------------------------------


@torch.no_grad()
def evaluate_policy(policy: PolicyNetwork, F: ValueNetwork, simulator: WorldModel, behavior: PolicyNetwork,
                    q_net: QNetwork | None, data: dict[str, torch.Tensor], cfg: EvalConfig) -> EvalReport:
    S, A, V, y = data["test_S"], data["test_A"], data["test_V"], data["test_y"]
    roll = policy_rollout(policy, simulator, S, A, V, cfg)
    ratio, vb, va = improvement_ratio(F, policy, simulator, S, A, V, cfg, roll)
    dr, direct = dr_estimate(policy, behavior, q_net, S, A, V, y.double().numpy(), cfg)
    kl = kl_metric(policy, data["expert_S"], data["expert_A"], data["expert_V"], cfg.t_s)
    div = diversity_metric(roll.actions[:, cfg.t_s:].double().numpy())
    return EvalReport(
        improvement_ratio=ratio,
        dr_value=dr,
        direct_value=direct,
        kl_divergence=kl,
        diversity=div,
        f1=f1_from_values(vb, va),
        n_trajectories=len(S),
    )


def policy_entropy(policy: PolicyNetwork, S, A, V, t_s: int) -> float:
    hs, ha, m = stacked_windows(S, A, V, range(t_s, S.shape[1]), policy.cfg.l)
    with torch.no_grad():
        return float(entropy(policy(hs, ha, m, S[:, t_s:].flatten(0, 1))).mean())
