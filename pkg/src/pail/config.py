"""Run configuration: one JSON document with a section per component, plus dotted-key overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .estimator import ValueNetConfig
from .evaluation import BCConfig, EvalConfig
from .plant import PlantConfig
from .simulator import SimulatorConfig
from .trainer import TrainConfig

SEED_ENV = "PAIL_SEED"

# fields filled from the data (dimensions) or from the run-level seed, never from the config file
_DERIVED = {
    "simulator": {"d_s", "K"},
    "value": {"d_s", "K", "T"},
    "train": {"seed"},
    "bc": {"seed"},
}


class ConfigError(ValueError):
    """Malformed configuration or unknown key."""


def _defaults(cls, skip: set[str]) -> dict[str, Any]:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        out[f.name] = f.default_factory() if f.default_factory is not MISSING else f.default
    return out


def _section_defaults() -> dict[str, dict[str, Any]]:
    plant = asdict(PlantConfig())
    return {
        "plant": plant,
        "split": {"expert_fraction": 0.1, "train_ratio": 0.8},
        "simulator": _defaults(SimulatorConfig, _DERIVED["simulator"]),
        "value": _defaults(ValueNetConfig, _DERIVED["value"]),
        "train": _defaults(TrainConfig, _DERIVED["train"]),
        "eval": asdict(EvalConfig()),
        "bc": _defaults(BCConfig, _DERIVED["bc"]),
    }


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Match the type of the default where the conversion is lossless."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if default is not None and not isinstance(value, type(default)) and not (
            isinstance(default, (list, tuple)) and isinstance(value, (list, tuple))):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


@dataclass
class RunConfig:
    seed: int = 0
    sections: dict[str, dict[str, Any]] = field(default_factory=_section_defaults)

    # --- construction -------------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        cfg.update(doc)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def update(self, doc: dict[str, Any]) -> None:
        for key, value in doc.items():
            if key == "seed":
                self.set("seed", value)
            elif key in self.sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                for sub, v in value.items():
                    self.set(f"{key}.{sub}", v)
            else:
                raise ConfigError(f"unknown config key {key!r}")

    def set(self, dotted: str, value: Any) -> None:
        if dotted == "seed":
            self.seed = _coerce(value, 0, "seed")
            return
        section, _, key = dotted.partition(".")
        if section not in self.sections or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        sec = self.sections[section]
        if key not in sec:
            raise ConfigError(f"unknown config key {dotted!r}")
        sec[key] = _coerce(value, sec[key], dotted)

    def apply_overrides(self, pairs: list[tuple[str, str]]) -> None:
        """``[("train.lam", "0.3"), ...]``; values are parsed as JSON, falling back to a bare string."""
        for key, raw in pairs:
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(key, value)

    def apply_env(self, environ: dict[str, str] | None = None) -> None:
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV):
            try:
                self.seed = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer") from exc

    # --- typed views ---------------------------------------------------------------------

    def plant(self) -> PlantConfig:
        return PlantConfig(**copy.deepcopy(self.sections["plant"]))

    def simulator(self, d_s: int, K: int) -> SimulatorConfig:
        return SimulatorConfig(d_s=d_s, K=K, **self.sections["simulator"])

    def value(self, d_s: int, K: int, T: int) -> ValueNetConfig:
        return ValueNetConfig(d_s=d_s, K=K, T=T, **self.sections["value"])

    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **copy.deepcopy(self.sections["train"]))

    def eval(self) -> EvalConfig:
        return EvalConfig(**self.sections["eval"])

    def bc(self) -> BCConfig:
        return BCConfig(seed=self.seed, **self.sections["bc"])

    @property
    def split(self) -> dict[str, float]:
        return dict(self.sections["split"])

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, **copy.deepcopy(self.sections)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def validate(self) -> None:
        """Build every typed view once so invalid values surface before any work starts."""
        try:
            self.plant()
            self.train()
            self.eval()
            self.bc()
            self.simulator(1, 1)
            self.value(1, 1, 1)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        sp = self.split
        if not 0.0 < sp["expert_fraction"] < 1.0 or not 0.0 < sp["train_ratio"] < 1.0:
            raise ConfigError("split.expert_fraction must lie in (0, 1) and split.train_ratio in (0, 1)")
