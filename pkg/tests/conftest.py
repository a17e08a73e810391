import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from pail import pipeline
from pail.config import RunConfig
from pail.plant import PlantConfig, generate_dataset, load_plant
from pail.simulator import WorldModel
from pail.trajectory import Normalization, read_jsonl

from helpers import ACCEPTANCE_LINES

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(PlantConfig(), seed=0)


@dataclass
class NoiseFreeWorld:
    """A σ_plant = 0 dataset with its pretrained world model and the plant it came from."""

    cfg: RunConfig
    run_dir: Path
    data: dict
    model: WorldModel
    scores: dict

    def oracle_mse(self, seed: int = 0) -> float:
        """One-step prediction MSE on held-out test pairs against the true plant transition."""
        _, dyn = load_plant(self.run_dir / "data" / "plant.json")
        norm = Normalization.from_json(json.loads((self.run_dir / "data" / "norm.json").read_text()))
        s_raw, a, s_true = [], [], []
        for tr in read_jsonl(self.run_dir / "data" / "test.jsonl"):
            s_raw.append(tr.states[:-1])
            a.append(tr.actions[:-1])
            s_true.append(dyn.step_true(tr.states[:-1], tr.actions[:-1]))
        s_raw, a, s_true = (np.concatenate(x) for x in (s_raw, a, s_true))
        s_in = torch.as_tensor((s_raw - norm.mean) / norm.divisor, dtype=torch.float32)
        target = (s_true - norm.mean) / norm.divisor
        g = torch.Generator().manual_seed(seed)
        pred = self.model.simulate_step(s_in, torch.as_tensor(a, dtype=torch.float32), g).double().numpy()
        return float(((pred - target) ** 2).mean())


@pytest.fixture(scope="session")
def noise_free_world(tmp_path_factory):
    run = tmp_path_factory.mktemp("noise-free")
    cfg = RunConfig()
    cfg.set("plant.sigma_plant", 0.0)
    pipeline.generate(cfg, run / "data")
    data = pipeline.load_data(run / "data")
    scores = pipeline.pretrain_simulator(cfg, data, run / "sim.ckpt")
    return NoiseFreeWorld(cfg, run, data, pipeline.load_simulator(run / "sim.ckpt"), scores)


@dataclass
class PreparedRun:
    """A run directory holding a generated dataset and the frozen simulator and value net."""

    cfg: RunConfig
    run_dir: Path
    data: dict
    scores: dict
    seconds: float


class RunFactory:
    """Builds default-config run directories once per seed and shares them across tests."""

    def __init__(self, root: Path):
        self.root = root
        self._prepared: dict[int, PreparedRun] = {}

    def prepared(self, seed: int) -> PreparedRun:
        if seed not in self._prepared:
            cfg = RunConfig()
            cfg.set("seed", seed)
            start = time.perf_counter()
            run = self.root / f"seed-{seed}"
            pipeline.generate(cfg, run / "data")
            data = pipeline.load_data(run / "data")
            scores = pipeline.pretrain_simulator(cfg, data, run / "sim.ckpt")
            scores.update(pipeline.pretrain_value(cfg, data, run / "value.ckpt"))
            self._prepared[seed] = PreparedRun(cfg, run, data, scores, time.perf_counter() - start)
        return self._prepared[seed]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return RunFactory(tmp_path_factory.mktemp("runs"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
