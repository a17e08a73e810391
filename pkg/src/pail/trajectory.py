"""Trajectory data model: alignment, history windows, splitting, normalization and JSONL IO."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Step:
    state: np.ndarray
    action: np.ndarray
    valid: bool = True


@dataclass(frozen=True)
class Trajectory:
    """Fixed-order sequence of (state, action) steps with an optional terminal SDG label.

    Backed by arrays: ``states`` is (n, d_s), ``actions`` is (n, K), ``valid`` is (n,).
    """

    states: np.ndarray
    actions: np.ndarray
    valid: np.ndarray = None  # type: ignore[assignment]
    sdg: float | None = None
    id: str = ""

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.float64)
        if states.ndim != 2 or actions.ndim != 2 or len(states) != len(actions):
            raise ValueError("states and actions must be 2-D arrays of equal length")
        valid = np.ones(len(states), dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid.shape != (len(states),):
            raise ValueError("valid mask length does not match steps")
        n_valid = int(valid.sum())
        if not valid[:n_valid].all():
            raise ValueError("valid steps must precede dummy steps")
        for arr in (states, actions, valid):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "valid", valid)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def steps(self) -> list[Step]:
        return [Step(s, a, bool(v)) for s, a, v in zip(self.states, self.actions, self.valid)]

    @classmethod
    def from_steps(cls, steps: Sequence[Step], sdg: float | None = None, id: str = "") -> "Trajectory":
        return cls(
            states=np.stack([st.state for st in steps]),
            actions=np.stack([st.action for st in steps]),
            valid=np.array([st.valid for st in steps]),
            sdg=sdg,
            id=id,
        )


@dataclass(frozen=True)
class HistoryWindow:
    """The ``l`` steps preceding t; left-padded entries are zero with mask False."""

    states: np.ndarray
    actions: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.mask)


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    @property
    def divisor(self) -> np.ndarray:
        return np.where(self.std < STD_FLOOR, 1.0, self.std)

    def to_json(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_json(cls, obj: dict) -> "Normalization":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


@dataclass(frozen=True)
class DatasetSplit:
    expert: list[Trajectory]
    train: list[Trajectory]
    test: list[Trajectory]
    normalization: Normalization | None = None
    normalized: bool = field(default=False)


def align_trajectory(traj: Trajectory, T: int) -> Trajectory:
    """Pad ``traj`` to exactly ``T`` steps with zero dummy steps."""
    n = len(traj)
    if n > T:
        raise ValueError("trajectory exceeds horizon")
    if n == T:
        return traj
    pad = T - n
    return Trajectory(
        states=np.concatenate([traj.states, np.zeros((pad, traj.states.shape[1]))]),
        actions=np.concatenate([traj.actions, np.zeros((pad, traj.actions.shape[1]))]),
        valid=np.concatenate([traj.valid, np.zeros(pad, dtype=bool)]),
        sdg=traj.sdg,
        id=traj.id,
    )


def history_at(traj: Trajectory, t: int, l: int) -> HistoryWindow:
    """Window of steps t-l .. t-1, left-padded with masked zeros before step 0."""
    if not 0 <= t < len(traj):
        raise IndexError(f"t={t} outside trajectory of length {len(traj)}")
    d_s, K = traj.states.shape[1], traj.actions.shape[1]
    states = np.zeros((l, d_s))
    actions = np.zeros((l, K))
    mask = np.zeros(l, dtype=bool)
    lo = max(0, t - l)
    n = t - lo
    if n:
        states[l - n:] = traj.states[lo:t]
        actions[l - n:] = traj.actions[lo:t]
        mask[l - n:] = traj.valid[lo:t]
    states[~mask] = 0.0
    actions[~mask] = 0.0
    return HistoryWindow(states, actions, mask)


def stack_windows(states: np.ndarray, actions: np.ndarray, valid: np.ndarray, t: int, l: int):
    """Batched ``history_at`` over arrays of shape (B, T, ·). Returns (hs, ha, mask)."""
    B, _, d_s = states.shape
    K = actions.shape[2]
    hs = np.zeros((B, l, d_s), dtype=states.dtype)
    ha = np.zeros((B, l, K), dtype=actions.dtype)
    mask = np.zeros((B, l), dtype=bool)
    lo = max(0, t - l)
    n = t - lo
    if n:
        hs[:, l - n:] = states[:, lo:t]
        ha[:, l - n:] = actions[:, lo:t]
        mask[:, l - n:] = valid[:, lo:t]
    hs[~mask] = 0.0
    ha[~mask] = 0.0
    return hs, ha, mask


def split_dataset(
    trajs: Sequence[Trajectory], expert_fraction: float = 0.10, train_ratio: float = 0.8, seed: int = 0
) -> DatasetSplit:
    if not 0.0 < expert_fraction < 1.0:
        raise ValueError("expert_fraction must lie in (0, 1)")
    if any(tr.sdg is None for tr in trajs):
        raise ValueError("every trajectory needs an sdg label")
    n = len(trajs)
    n_expert = math.ceil(expert_fraction * n)
    # stable sort: ties keep input order
    order = sorted(range(n), key=lambda i: -float(trajs[i].sdg))  # type: ignore[arg-type]
    expert_idx = order[:n_expert]
    rest = sorted(order[n_expert:])
    rng = np.random.default_rng(seed)
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_train = math.floor(train_ratio * len(rest) + 1e-9)
    return DatasetSplit(
        expert=[trajs[i] for i in expert_idx],
        train=[trajs[i] for i in rest[:n_train]],
        test=[trajs[i] for i in rest[n_train:]],
    )


def fit_normalization(trajs: Iterable[Trajectory]) -> Normalization:
    rows = [tr.states[tr.valid] for tr in trajs]
    X = np.concatenate(rows, axis=0)
    return Normalization(X.mean(axis=0), X.std(axis=0))


def _apply(tr: Trajectory, fn) -> Trajectory:
    states = np.array(tr.states)
    states[tr.valid] = fn(states[tr.valid])
    return replace(tr, states=states)


def normalize_trajectory(tr: Trajectory, norm: Normalization) -> Trajectory:
    return _apply(tr, lambda x: (x - norm.mean) / norm.divisor)


def denormalize_trajectory(tr: Trajectory, norm: Normalization) -> Trajectory:
    return _apply(tr, lambda x: x * norm.divisor + norm.mean)


def normalize(split: DatasetSplit) -> DatasetSplit:
    """Z-score states using statistics from expert and train only; actions stay in raw units."""
    if split.normalized:
        return split
    norm = split.normalization or fit_normalization(list(split.expert) + list(split.train))
    f = lambda trs: [normalize_trajectory(tr, norm) for tr in trs]  # noqa: E731
    return DatasetSplit(f(split.expert), f(split.train), f(split.test), norm, True)


def denormalize(split: DatasetSplit) -> DatasetSplit:
    if not split.normalized:
        return split
    norm = split.normalization
    f = lambda trs: [denormalize_trajectory(tr, norm) for tr in trs]  # noqa: E731
    return DatasetSplit(f(split.expert), f(split.train), f(split.test), norm, False)


# --- serialization -------------------------------------------------------------------------


def trajectory_to_record(tr: Trajectory) -> dict:
    steps = [
        {"s": [float(x) for x in s], "a": [float(x) for x in a]}
        for s, a, v in zip(tr.states, tr.actions, tr.valid)
        if v
    ]
    return {"id": tr.id, "sdg": None if tr.sdg is None else float(tr.sdg), "steps": steps}


def trajectory_from_record(rec: dict, T: int | None = None) -> Trajectory:
    steps = rec["steps"]
    tr = Trajectory(
        states=np.array([st["s"] for st in steps], dtype=np.float64),
        actions=np.array([st["a"] for st in steps], dtype=np.float64),
        sdg=rec.get("sdg"),
        id=str(rec.get("id", "")),
    )
    return tr if T is None else align_trajectory(tr, T)


def write_jsonl(path: str | Path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajs:
            fh.write(json.dumps(trajectory_to_record(tr)) + "\n")


def read_jsonl(path: str | Path, T: int | None = None) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [trajectory_from_record(json.loads(line), T) for line in fh if line.strip()]


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def save_split(split: DatasetSplit, out_dir: str | Path) -> None:
    """Write expert/train/test JSONL in raw units plus ``norm.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = denormalize(split)
    norm = raw.normalization or fit_normalization(list(raw.expert) + list(raw.train))
    write_jsonl(out / "expert.jsonl", raw.expert)
    write_jsonl(out / "train.jsonl", raw.train)
    write_jsonl(out / "test.jsonl", raw.test)
    with open(out / "norm.json", "w", encoding="utf-8") as fh:
        json.dump(norm.to_json(), fh, indent=1)


def load_split(data_dir: str | Path, T: int | None = None, normalized: bool = True) -> DatasetSplit:
    d = Path(data_dir)
    with open(d / "norm.json", encoding="utf-8") as fh:
        norm = Normalization.from_json(json.load(fh))
    split = DatasetSplit(
        read_jsonl(d / "expert.jsonl", T),
        read_jsonl(d / "train.jsonl", T),
        read_jsonl(d / "test.jsonl", T),
        norm,
        False,
    )
    return normalize(split) if normalized else split


def to_arrays(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack aligned trajectories into (states, actions, valid, sdg) arrays."""
    S = np.stack([tr.states for tr in trajs])
    A = np.stack([tr.actions for tr in trajs])
    V = np.stack([tr.valid for tr in trajs])
    y = np.array([np.nan if tr.sdg is None else tr.sdg for tr in trajs], dtype=np.float64)
    return S, A, V, y
