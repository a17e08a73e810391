import json

import pytest

from pail.config import SEED_ENV, ConfigError, RunConfig


def test_every_section_has_defaults():
    cfg = RunConfig()
    assert set(cfg.sections) == {"plant", "split", "simulator", "value", "train", "eval", "bc"}
    assert all(v is not None for sec in cfg.sections.values() for v in sec.values())
    cfg.validate()


def test_default_dataset_shape_settings():
    plant = RunConfig().plant()
    assert (plant.n_traj, plant.T, plant.d_s, plant.K) == (1100, 30, 16, 5)
    assert RunConfig().split == {"expert_fraction": 0.1, "train_ratio": 0.8}


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig.from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        RunConfig().set("train", 1)


def test_derived_fields_are_not_configurable():
    for key in ("simulator.d_s", "value.T", "train.seed"):
        with pytest.raises(ConfigError):
            RunConfig().set(key, 3)


def test_type_mismatch_is_rejected():
    with pytest.raises(ConfigError):
        RunConfig().set("train.epochs", "many")
    with pytest.raises(ConfigError):
        RunConfig().set("train.deterministic_head", 1)


def test_lossless_numeric_coercion():
    cfg = RunConfig()
    cfg.set("train.lam", 1)
    cfg.set("train.epochs", 12.0)
    assert cfg.train().lam == 1.0 and isinstance(cfg.train().lam, float)
    assert cfg.train().epochs == 12 and isinstance(cfg.train().epochs, int)


def test_overrides_parse_json_values():
    cfg = RunConfig()
    cfg.apply_overrides([("train.lam", "0.25"), ("train.disc_hidden", "[16, 16]"), ("train.reward_sign", "literal"),
                         ("seed", "7")])
    tc = cfg.train()
    assert (tc.lam, tc.disc_hidden, tc.reward_sign, tc.seed) == (0.25, [16, 16], "literal", 7)


def test_seed_environment_variable_overrides_config():
    cfg = RunConfig.from_dict({"seed": 3})
    cfg.apply_env({SEED_ENV: "11"})
    assert cfg.seed == 11 and cfg.train().seed == 11 and cfg.bc().seed == 11
    cfg.apply_env({})
    assert cfg.seed == 11
    with pytest.raises(ConfigError):
        cfg.apply_env({SEED_ENV: "eleven"})


def test_out_of_range_values_fail_validation():
    for key, value in (("train.lam", 2.0), ("plant.sigma_plant", -1.0), ("split.expert_fraction", 1.5)):
        cfg = RunConfig()
        cfg.set(key, value)
        with pytest.raises(ConfigError):
            cfg.validate()


def test_save_and_load_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"seed": 5, "train": {"lam": 0.3}, "plant": {"n_traj": 20}})
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()


def test_invalid_json_file(tmp_path):
    (tmp_path / "bad.json").write_text("{seed: 1")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "list.json")


def test_ablation_free_train_view_matches_defaults():
    tc = RunConfig().train()
    assert not (tc.deterministic_head or tc.no_history_discriminator or tc.no_performance_estimator)
    assert (tc.t_s, tc.lam, tc.beta0, tc.k) == (9, 0.5, 0.1, 0.05)
