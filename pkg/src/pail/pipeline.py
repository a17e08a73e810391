"""End-to-end stages shared by the command line and the acceptance suite.

Run directory layout::

    <run>/config.json          resolved configuration of the latest command
    <run>/data/                expert/train/test JSONL, norm.json, plant.json, summary.json
    <run>/sim.ckpt             frozen world model
    <run>/value.ckpt           frozen trajectory value net
    <run>/train[-<ablation>]/  policy, discriminator, Q, Q', optimizer state, rng.bin, metrics.jsonl
    <run>/behavior.ckpt        behavior policy fitted on the train split (importance weights)
    <run>/bc/policy.ckpt       behavior-cloning baseline fitted on the expert set
    <run>/results.jsonl        one evaluation report per line
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .estimator import QNetConfig, QNetwork, ValueNetConfig, ValueNetwork, pretrain_value_net, r_squared
from .evaluation import bc_baseline, evaluate_policy, importance_heatmap, policy_rollout, write_heatmap
from .plant import PlantDynamics, generate_dataset, save_plant
from .policy import PolicyConfig, PolicyNetwork
from .simulator import SimulatorConfig, SimulatorFrozenError, WorldModel, pretrain, prediction_mse, transition_triples
from .trainer import Trainer, tensors_from_split
from .trajectory import load_split, save_split, split_dataset

log = logging.getLogger(__name__)

DATA_FILES = ("expert.jsonl", "train.jsonl", "test.jsonl", "norm.json")


class MissingArtifact(FileNotFoundError):
    """A stage input (dataset, pretrained model, trained policy) does not exist yet."""


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def train_dir_name(ablation: str | None) -> str:
    return f"train-{ablation}" if ablation else "train"


# --- data ----------------------------------------------------------------------------------


def generate(cfg: RunConfig, data_dir: str | Path, workers: int = 1) -> dict:
    """Simulate the plant, split by SDG and write the dataset files; returns a summary."""
    out = Path(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = cfg.plant()
    dyn = PlantDynamics.from_config(pcfg)
    trajs = generate_dataset(pcfg, seed=cfg.seed, workers=workers, dyn=dyn)
    sp = cfg.split
    split = split_dataset(trajs, sp["expert_fraction"], sp["train_ratio"], seed=cfg.seed)
    save_split(split, out)
    save_plant(out / "plant.json", pcfg, dyn)
    sdg = np.array([tr.sdg for tr in trajs])
    summary = {
        "n": len(trajs), "T": pcfg.T, "d_s": pcfg.d_s, "K": pcfg.K,
        "n_expert": len(split.expert), "n_train": len(split.train), "n_test": len(split.test),
        "sdg_quantiles": {str(q): float(np.quantile(sdg, q)) for q in (0.0, 0.25, 0.5, 0.75, 1.0)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return summary


def load_data(data_dir: str | Path) -> dict[str, torch.Tensor]:
    d = Path(data_dir)
    if not d.is_dir():
        raise MissingArtifact(f"dataset directory not found: {d}")
    for name in DATA_FILES:
        _require(d / name, "dataset file")
    return tensors_from_split(load_split(d))


def _triples(data: dict[str, torch.Tensor], *names: str):
    parts = [transition_triples(data[f"{n}_S"].numpy(), data[f"{n}_A"].numpy(), data[f"{n}_V"].numpy())
             for n in names]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


# --- pretraining ---------------------------------------------------------------------------


def pretrain_simulator(cfg: RunConfig, data: dict[str, torch.Tensor], out_path: str | Path) -> dict:
    """Fit the world model on expert and train transitions, freeze it, and save it with its scores."""
    d_s, K = data["train_S"].shape[2], data["train_A"].shape[2]
    torch.manual_seed(cfg.seed)
    model = WorldModel(cfg.simulator(d_s, K))
    pretrain(model, _triples(data, "expert", "train"), seed=cfg.seed)
    s, a, sn = (torch.as_tensor(x) for x in _triples(data, "test"))
    heldout = prediction_mse(model, s, a, sn, cfg.seed)
    meta = {"d_s": d_s, "K": K, "frozen": True, "val_mse": model.val_mse, "heldout_mse": heldout,
            "config": asdict(model.cfg)}
    ckpt.save_module(out_path, model, meta)
    return {"val_mse": model.val_mse, "heldout_mse": heldout}


def load_simulator(path: str | Path) -> WorldModel:
    meta = ckpt.read_meta(_require(Path(path), "simulator checkpoint"))
    if not meta.get("frozen"):
        raise SimulatorFrozenError(f"simulator not frozen: {path}")
    model = WorldModel(SimulatorConfig(**meta["config"]))
    ckpt.load_module(path, model)
    model.val_mse = meta["val_mse"]
    return model.freeze()


def pretrain_value(cfg: RunConfig, data: dict[str, torch.Tensor], out_path: str | Path) -> dict:
    """Fit V(τ) on every labeled expert and train trajectory; report R² on the test split."""
    S = torch.cat([data["expert_S"], data["train_S"]])
    A = torch.cat([data["expert_A"], data["train_A"]])
    V = torch.cat([data["expert_V"], data["train_V"]])
    y = torch.cat([data["expert_y"], data["train_y"]])
    _, T, d_s = S.shape
    torch.manual_seed(cfg.seed)
    model = ValueNetwork(cfg.value(d_s, A.shape[2], T))
    pretrain_value_net(model, S, A, V, y, seed=cfg.seed)
    with torch.no_grad():
        pred = model(data["test_S"], data["test_A"], data["test_V"]).double().numpy()
    test_r2 = r_squared(pred, data["test_y"].double().numpy())
    ckpt.save_module(out_path, model, {"test_r2": test_r2, "config": asdict(model.cfg)})
    return {"test_r2": test_r2}


def load_value(path: str | Path) -> ValueNetwork:
    meta = ckpt.read_meta(_require(Path(path), "value-net checkpoint"))
    model = ValueNetwork(ValueNetConfig(**meta["config"]))
    ckpt.load_module(path, model)
    return model.freeze()


# --- policy training -----------------------------------------------------------------------


def make_trainer(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor],
                 ablation: str | None = None) -> Trainer:
    run = Path(run_dir)
    return Trainer(cfg.train().with_ablation(ablation), load_simulator(run / "sim.ckpt"),
                   load_value(run / "value.ckpt"), data)


def train(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor], ablation: str | None = None,
          epochs: int | None = None, resume: bool = False, out_dir: str | Path | None = None) -> Trainer:
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / train_dir_name(ablation)
    if resume:
        _require(out / "state.json", "checkpoint to resume")
    trainer = make_trainer(cfg, run_dir, data, ablation)
    trainer.train(out, resume=resume, epochs=epochs)
    return trainer


def load_policy(path: str | Path) -> PolicyNetwork:
    meta = ckpt.read_meta(_require(Path(path), "policy checkpoint"))
    keys = ("d_s", "K", "d", "h", "L", "l", "d_ff", "deterministic")
    policy = PolicyNetwork(PolicyConfig(**{k: meta[k] for k in keys}))
    ckpt.load_module(path, policy)
    return policy.eval()


def save_policy(path: str | Path, policy: PolicyNetwork) -> None:
    ckpt.save_module(path, policy, asdict(policy.cfg))


def load_q(path: str | Path, d_s: int, K: int, hidden) -> QNetwork:
    q = QNetwork(QNetConfig(d_s, K, tuple(hidden)))
    ckpt.load_module(_require(Path(path), "Q checkpoint"), q)
    return q.requires_grad_(False)


def _policy_config(cfg: RunConfig, data: dict[str, torch.Tensor]) -> PolicyConfig:
    tc = cfg.train()
    return PolicyConfig(data["train_S"].shape[2], data["train_A"].shape[2], tc.d, tc.h, tc.L, tc.l, tc.d_ff)


def _cached_fit(path: Path, fit) -> PolicyNetwork:
    if path.exists():
        return load_policy(path)
    policy = fit()
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy(path, policy)
    return policy.eval()


def behavior_policy(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor]) -> PolicyNetwork:
    """Maximum-likelihood fit to the logged train-split actions, used for importance ratios."""
    return _cached_fit(Path(run_dir) / "behavior.ckpt", lambda: bc_baseline(
        data["train_S"], data["train_A"], data["train_V"], _policy_config(cfg, data), cfg.bc()))


def bc_policy(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor]) -> PolicyNetwork:
    """Behavior-cloning baseline fitted on the expert set."""
    return _cached_fit(Path(run_dir) / "bc" / "policy.ckpt", lambda: bc_baseline(
        data["expert_S"], data["expert_A"], data["expert_V"], _policy_config(cfg, data), cfg.bc()))


def untrained_policy(cfg: RunConfig, data: dict[str, torch.Tensor], ablation: str | None = None) -> PolicyNetwork:
    """The policy a fresh trainer starts from (same seed, same initialization)."""
    torch.manual_seed(cfg.seed)
    pc = _policy_config(cfg, data)
    pc.deterministic = cfg.train().with_ablation(ablation).deterministic_head
    return PolicyNetwork(pc).eval()


def resolve_policy(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor],
                   name: str) -> tuple[PolicyNetwork, QNetwork | None]:
    """``bc``, ``untrained`` or the name of a training directory inside the run."""
    run = Path(run_dir)
    if name == "bc":
        return bc_policy(cfg, run, data), None
    if name == "untrained":
        return untrained_policy(cfg, data), None
    d = run / name
    policy = load_policy(d / "policy.ckpt")
    q = None
    if (d / "q.ckpt").exists():
        with open(d / "config.json", encoding="utf-8") as fh:
            hidden = json.load(fh)["q_hidden"]
        q = load_q(d / "q.ckpt", policy.cfg.d_s, policy.cfg.K, hidden)
    return policy, q


# --- evaluation ----------------------------------------------------------------------------


def evaluate(cfg: RunConfig, run_dir: str | Path, data: dict[str, torch.Tensor], name: str) -> dict:
    run = Path(run_dir)
    policy, q = resolve_policy(cfg, run, data, name)
    report = evaluate_policy(policy, load_value(run / "value.ckpt"), load_simulator(run / "sim.ckpt"),
                             behavior_policy(cfg, run, data), q, data, cfg.eval())
    return {"policy": name, **report.to_json()}


def append_result(run_dir: str | Path, record: dict) -> None:
    with open(Path(run_dir) / "results.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def heatmap(cfg: RunConfig, run_dir: str | Path, data_dir: str | Path, data: dict[str, torch.Tensor],
            name: str, traj_id: str, out_path: str | Path) -> np.ndarray:
    """Importance/similarity matrix for one test trajectory after the policy rewrites its actions."""
    run = Path(run_dir)
    ids = [tr.id for tr in load_split(data_dir).test]
    if traj_id not in ids:
        raise KeyError(f"trajectory {traj_id!r} is not in the test split")
    i = ids.index(traj_id)
    policy, _ = resolve_policy(cfg, run, data, name)
    S, A, V = data["test_S"][i:i + 1], data["test_A"][i:i + 1], data["test_V"][i:i + 1]
    roll = policy_rollout(policy, load_simulator(run / "sim.ckpt"), S, A, V, cfg.eval())
    n = int(V[0].sum())
    matrix = importance_heatmap(load_value(run / "value.ckpt"), roll.states[0], roll.actions[0], V[0],
                                A[0].numpy())[:, :n]
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_heatmap(out_path, matrix)
    return matrix

