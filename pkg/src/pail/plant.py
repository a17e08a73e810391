"""Synthetic industrial plant with known dynamics and terminal SDG, plus an enumerable toy process."""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .trajectory import Trajectory


_DEFAULT_CP = (1.0, 6.0, 0.5, 8.0, 4.0)
_DEFAULT_CE = (3.0, 0.5, 3.0, 0.4, 0.5)


@dataclass
class PlantConfig:
    d_s: int = 16
    K: int = 5
    T: int = 30
    n_traj: int = 1100
    dynamics_seed: int = 0
    sigma_plant: float = 0.02
    c_p: list[float] | None = None
    c_e: list[float] | None = None
    nonlinear_gain: float = 0.3
    # fraction of each efficiency direction aligned with the action input span (delayed payoff)
    coupling: float = 0.6
    behavior_noise: float = 1.0
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.d_s, self.K, self.T, self.n_traj) <= 0:
            raise ValueError("d_s, K, T and n_traj must be positive")
        if self.sigma_plant < 0:
            raise ValueError("sigma_plant must be >= 0")
        # heterogeneous default economics: optimal levels differ sharply across action types
        if self.c_p is None:
            self.c_p = [_DEFAULT_CP[k % 5] for k in range(self.K)]
        if self.c_e is None:
            self.c_e = [_DEFAULT_CE[k % 5] for k in range(self.K)]
        if len(self.c_p) != self.K or len(self.c_e) != self.K:
            raise ValueError("c_p and c_e must have length K")


@dataclass(frozen=True)
class PlantDynamics:
    A: np.ndarray  # (d_s, d_s), symmetric, spectral radius < 1
    B: np.ndarray  # (d_s, K)
    C: np.ndarray  # (d_s, d_s)
    D: np.ndarray  # (d_s, K)
    U: np.ndarray  # (K, d_s) efficiency directions
    c_p: np.ndarray
    c_e: np.ndarray
    gain: float
    noise: float

    @property
    def d_s(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.B.shape[1]

    @classmethod
    def from_config(cls, cfg: PlantConfig) -> "PlantDynamics":
        rng = np.random.default_rng(cfg.dynamics_seed)
        d, K = cfg.d_s, cfg.K
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        eig = rng.uniform(0.2, 0.9, size=d)
        A = (Q * eig) @ Q.T
        A = 0.5 * (A + A.T)
        B = rng.normal(size=(d, K)) * (0.6 / np.sqrt(K))
        C = rng.normal(size=(d, d)) / np.sqrt(d)
        D = rng.normal(size=(d, K)) / np.sqrt(K)
        # efficiency of action k rises with the state it (and its peers) pushes into
        U = rng.normal(size=(K, d))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        Bn = B / np.linalg.norm(B, axis=0, keepdims=True)
        U = (1 - cfg.coupling) * U + cfg.coupling * Bn.T
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        return cls(A, B, C, D, U, np.asarray(cfg.c_p, float), np.asarray(cfg.c_e, float),
                   float(cfg.nonlinear_gain), float(cfg.sigma_plant))

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def step_true(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.shape[-1] != self.d_s or a.shape[-1] != self.K:
            raise ValueError(f"dimension mismatch: state {s.shape}, action {a.shape}")
        nxt = s @ self.A.T + a @ self.B.T + self.gain * np.tanh((s @ self.C.T) * (a @ self.D.T))
        if self.noise > 0:
            if rng is None:
                raise ValueError("rng required when sigma_plant > 0")
            nxt = nxt + self.noise * rng.normal(size=nxt.shape)
        return nxt

    def efficiency(self, s: np.ndarray) -> np.ndarray:
        return 1.0 + 0.5 * np.tanh(np.asarray(s) @ self.U.T)

    def step_value(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Per-step production minus emission; internal to SDG, never exposed per step."""
        a = np.asarray(a, dtype=np.float64)
        yield_ = (self.c_p * self.efficiency(s) * np.tanh(a)).sum(-1)
        emission = (self.c_e * a**2).sum(-1)
        return yield_ - emission

    def true_sdg(self, traj: Trajectory) -> float:
        v = traj.valid
        return float(self.step_value(traj.states[v], traj.actions[v]).sum())

    def rollout(self, s0: np.ndarray, actions: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """States s_0..s_{n-1} visited under ``actions`` (state after the last action is dropped)."""
        states = [np.asarray(s0, dtype=np.float64)]
        for a in actions[:-1]:
            states.append(self.step_true(states[-1], a, rng))
        return np.stack(states)

    def to_json(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "PlantDynamics":
        arr = {k: np.asarray(obj[k], dtype=np.float64) for k in ("A", "B", "C", "D", "U", "c_p", "c_e")}
        return cls(**arr, gain=float(obj["gain"]), noise=float(obj["noise"]))


def myopic_levels(dyn: PlantDynamics) -> np.ndarray:
    """Per-type action maximizing c_p·tanh(a) - c_e·a² at unit efficiency (bisection on a·cosh²a = c_p/2c_e)."""
    rho = dyn.c_p / (2.0 * dyn.c_e)
    lo, hi = np.zeros_like(rho), np.full_like(rho, 5.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        up = mid * np.cosh(mid) ** 2 < rho
        lo, hi = np.where(up, mid, lo), np.where(up, hi, mid)
    return 0.5 * (lo + hi)


def behavior_action(dyn: PlantDynamics, s: np.ndarray, base: np.ndarray, gain: np.ndarray,
                    step_noise, rng: np.random.Generator) -> np.ndarray:
    """Proportional controller on the efficiency signal plus exploration noise, clamped at 0."""
    signal = np.tanh(s @ dyn.U.T)
    a = base + gain * signal
    if np.any(np.asarray(step_noise) > 0):
        a = a + step_noise * rng.normal(size=a.shape)
    return np.maximum(a, 0.0)


def _generate_one(args) -> Trajectory:
    cfg, dyn, seed_seq, idx = args
    rng = np.random.default_rng(seed_seq)
    bn = cfg.behavior_noise
    # operators under-dose on average and differ in how they track the efficiency signal
    nominal = 0.75 * myopic_levels(dyn)
    base = nominal * (0.85 + 0.25 * bn * rng.normal(size=cfg.K))
    gain = nominal * (0.05 + 0.1 * bn * rng.normal(size=cfg.K))
    s = cfg.init_scale * rng.normal(size=cfg.d_s)
    states, actions = [], []
    for _ in range(cfg.T):
        a = behavior_action(dyn, s, base, gain, 0.2 * bn * nominal, rng)
        states.append(s)
        actions.append(a)
        s = dyn.step_true(s, a, rng)
    tr = Trajectory(np.stack(states), np.stack(actions), id=f"traj-{idx:05d}")
    return Trajectory(tr.states, tr.actions, sdg=dyn.true_sdg(tr), id=tr.id)


def generate_dataset(cfg: PlantConfig, seed: int = 0, workers: int = 1,
                     dyn: PlantDynamics | None = None) -> list[Trajectory]:
    """Roll out the behavior policy ``cfg.n_traj`` times; each trajectory gets its own derived seed."""
    dyn = dyn or PlantDynamics.from_config(cfg)
    seqs = np.random.SeedSequence(seed).spawn(cfg.n_traj)
    jobs = [(cfg, dyn, sq, i) for i, sq in enumerate(seqs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_generate_one, jobs, chunksize=32))
    return [_generate_one(j) for j in jobs]


def save_plant(path: str | Path, cfg: PlantConfig, dyn: PlantDynamics) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"config": asdict(cfg), "dynamics": dyn.to_json()}, fh)


def load_plant(path: str | Path) -> tuple[PlantConfig, PlantDynamics]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return PlantConfig(**obj["config"]), PlantDynamics.from_json(obj["dynamics"])


# --- enumerable toy process ---------------------------------------------------------------


@dataclass(frozen=True)
class ToyMDP:
    """Finite-horizon process with tabulated transitions and terminal values.

    ``P[s, a, s']`` are transition probabilities, ``terminal[s]`` the value of the state reached
    after the final action, ``initial[s]`` the start distribution. Policies are tables ``pi[s, a]``.
    """

    P: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray
    horizon: int = 3

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def paths(self, pi: np.ndarray):
        """Yield (probability, states[0..H], actions[0..H-1]) for every path with nonzero mass."""
        S, A, H = self.n_states, self.n_actions, self.horizon
        for states in itertools.product(range(S), repeat=H + 1):
            for actions in itertools.product(range(A), repeat=H):
                p = self.initial[states[0]]
                for t in range(H):
                    p *= pi[states[t], actions[t]] * self.P[states[t], actions[t], states[t + 1]]
                if p > 0:
                    yield p, states, actions

    def exact_value(self, pi: np.ndarray) -> float:
        return float(sum(p * self.terminal[st[-1]] for p, st, _ in self.paths(pi)))

    def backward_q(self, pi: np.ndarray, rewards: np.ndarray | None = None, gamma: float = 1.0) -> np.ndarray:
        """Q[t, s, a] by backward induction; the last step is grounded on the terminal value."""
        S, A, H = self.n_states, self.n_actions, self.horizon
        r = np.zeros((S, A)) if rewards is None else rewards
        Q = np.zeros((H, S, A))
        Q[H - 1] = self.P @ self.terminal
        for t in range(H - 2, -1, -1):
            v_next = (pi * Q[t + 1]).sum(-1)
            Q[t] = r + gamma * self.P @ v_next
        return Q

    def sample(self, pi: np.ndarray, n: int, rng: np.random.Generator):
        """Sample ``n`` paths. Returns (states (n, H+1), actions (n, H))."""
        S, A, H = self.n_states, self.n_actions, self.horizon
        states = np.zeros((n, H + 1), dtype=int)
        actions = np.zeros((n, H), dtype=int)
        states[:, 0] = rng.choice(S, size=n, p=self.initial)
        for t in range(H):
            u = rng.random(n)
            actions[:, t] = (u[:, None] > np.cumsum(pi[states[:, t]], axis=1)).sum(1)
            u = rng.random(n)
            cdf = np.cumsum(self.P[states[:, t], actions[:, t]], axis=1)
            states[:, t + 1] = np.minimum((u[:, None] > cdf).sum(1), S - 1)
        return states, actions


def toy_mdp(deterministic: bool = False) -> ToyMDP:
    """2 states, 2 actions, 3 steps."""
    if deterministic:
        P = np.zeros((2, 2, 2))
        P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 0] = 1.0
        initial = np.array([1.0, 0.0])
    else:
        P = np.array([
            [[0.8, 0.2], [0.3, 0.7]],
            [[0.6, 0.4], [0.1, 0.9]],
        ])
        initial = np.array([0.6, 0.4])
    terminal = np.array([1.0, 3.0])
    return ToyMDP(P, terminal, initial, 3)


def enumerate_best_worst(dyn: PlantDynamics, s0: np.ndarray, grid: Sequence[float], T: int,
                         sdg_fn: Callable[[Trajectory], float] | None = None):
    """Exhaustive search over per-step action grids (K must be 1). Returns ((best, seq), (worst, seq))."""
    if dyn.K != 1:
        raise ValueError("enumeration is only supported for K=1")
    sdg_fn = sdg_fn or dyn.true_sdg
    results = []
    for seq in itertools.product(grid, repeat=T):
        acts = np.asarray(seq, dtype=np.float64)[:, None]
        states = dyn.rollout(s0, acts)
        results.append((sdg_fn(Trajectory(states, acts)), seq))
    best = max(results, key=lambda x: x[0])
    worst = min(results, key=lambda x: x[0])
    return best, worst
