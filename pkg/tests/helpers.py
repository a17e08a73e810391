"""Shared test utilities: central-difference gradient checks and scalar-loop oracles."""

import copy
import math

import torch

from pail.estimator import ValueNetConfig, ValueNetwork
from pail.policy import PolicyConfig, PolicyNetwork
from pail.simulator import SimulatorConfig, WorldModel


# criterion number -> one PASS/FAIL line, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def scalar_attention(Q, K, V, mask=None):
    """softmax(QKᵀ/√d_k)V evaluated entry by entry with Python floats."""
    n_q, d_k = len(Q), len(Q[0])
    n_k, d_v = len(K), len(V[0])
    out = []
    for i in range(n_q):
        logits = []
        for j in range(n_k):
            if mask is not None and not mask[j]:
                logits.append(None)
                continue
            logits.append(sum(Q[i][c] * K[j][c] for c in range(d_k)) / math.sqrt(d_k))
        top = max(x for x in logits if x is not None)
        w = [0.0 if x is None else math.exp(x - top) for x in logits]
        z = sum(w)
        out.append([sum(w[j] / z * V[j][c] for j in range(n_k)) for c in range(d_v)])
    return out


def randomize_(module: torch.nn.Module, generator: torch.Generator, scale: float = 0.5) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))


def gradient_check(module: torch.nn.Module, loss_fn, n_points: int = 10, step: float = 1e-5,
                   seed: int = 0, scale: float = 0.5, prefixes: tuple[str, ...] = ("",),
                   floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference directional derivatives.

    At each of ``n_points`` random parameter points, every trainable tensor is probed along a
    random unit direction: (L(θ + h·v) - L(θ - h·v)) / 2h against ⟨∇L, v⟩, in float64.
    Only parameters whose names start with one of ``prefixes`` are probed; each must get a gradient.
    Derivatives smaller than ``floor`` in magnitude are compared in absolute terms, since there the
    finite-difference roundoff (about 1e-16·|L| / step) dominates any relative measure.
    """
    model = copy.deepcopy(module).double()
    model.requires_grad_(True)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_points):
        randomize_(model, g, scale)
        model.zero_grad()
        loss_fn(model).backward()
        for name, p in model.named_parameters():
            if not name.startswith(prefixes):
                continue
            if p.grad is None:
                raise AssertionError(f"{name} received no gradient")
            v = torch.randn(p.shape, generator=g, dtype=p.dtype)
            v /= v.norm()
            analytic = float((p.grad * v).sum())
            with torch.no_grad():
                p.add_(step * v)
                up = float(loss_fn(model))
                p.sub_(2 * step * v)
                down = float(loss_fn(model))
                p.add_(step * v)
            numeric = (up - down) / (2 * step)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# --- tiny components for fast pipeline tests -------------------------------------------------

D_S, K, T = 3, 2, 8  # state width, action width, horizon


def tiny_data(seed=0, n=12):
    g = torch.Generator().manual_seed(seed)
    out = {}
    for name in ("expert", "train", "test"):
        S = torch.randn(n, T, D_S, generator=g)
        A = torch.rand(n, T, K, generator=g)
        V = torch.ones(n, T, dtype=torch.bool)
        V[: n // 3, T - 2:] = False
        S[~V], A[~V] = 0.0, 0.0
        out.update({f"{name}_S": S, f"{name}_A": A, f"{name}_V": V, f"{name}_y": S[:, 0, 0] + A.sum((1, 2))})
    return out


def frozen_simulator(seed=0):
    torch.manual_seed(seed)
    return WorldModel(SimulatorConfig(d_s=D_S, K=K, d_z=2, hidden=8)).freeze()


def frozen_value(seed=0):
    torch.manual_seed(seed)
    return ValueNetwork(ValueNetConfig(d_s=D_S, K=K, T=T, d=8, h=2, L=1, d_ff=16)).freeze()


def tiny_policy(seed=0, deterministic=False):
    torch.manual_seed(seed)
    return PolicyNetwork(PolicyConfig(D_S, K, d=8, h=2, L=1, l=4, d_ff=16, deterministic=deterministic))
