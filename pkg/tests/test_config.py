import json
from pathlib import Path

import pytest

from adapterforge.config import (
    SEED_ENV,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_hash,
    load_config,
)

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else json.dumps(data), encoding="utf-8")
    return p


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == ExperimentConfig()
    assert (cfg.task.in_features, cfg.task.teacher_rank, cfg.task.noise, cfg.task.samples) == (64, 4, 0.01, 4096)
    assert (cfg.train.steps, cfg.train.batch_size, cfg.train.eval_every) == (500, 64, 25)
    assert cfg.train.divergence_factor == 1e3


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"task": {"dims": 3}},
    {"adapter": {"variant": "lora", "ranks": 4}},
    {"sweep": {"variants": [{"variant": "lora", "x": 1}]}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"adapter": {"variant": "nope"}},
    {"adapter": {"rank": 0}},
    {"adapter": {"variant": "lora", "params": {"blocks": 2}}},
    {"optimizer": {"kind": "rmsprop"}},
    {"schedule": {"kind": "jagged"}},
    {"sweep": {"lrs": []}},
    {"seed": -1},
    {"seed": True},
    {"task": {"noise": -0.1}},
])
def test_invalid_values(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_malformed_json_position(tmp_path):
    p = write(tmp_path, '{\n  "seed": 1,\n  "task": {,}\n}')
    with pytest.raises(ConfigError, match=r"cfg\.json:3:12"):
        load_config(p, env={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json", env={})


def test_seed_env_override(tmp_path):
    p = write(tmp_path, {"seed": 3})
    assert load_config(p, env={}).seed == 3
    assert load_config(p, env={SEED_ENV: "11"}).seed == 11
    assert load_config(p, env={SEED_ENV: ""}).seed == 3
    with pytest.raises(ConfigError):
        load_config(p, env={SEED_ENV: "x"})


def test_hash_ignores_output_and_tracks_content():
    a = config_from_dict({"seed": 1})
    assert config_hash(a) == config_hash(config_from_dict({"seed": 1, "output": "x.json"}))
    assert config_hash(a) != config_hash(config_from_dict({"seed": 2}))
    assert len(config_hash(a)) == 16


def test_dict_round_trip():
    cfg = config_from_dict({"sweep": {"variants": ["lora", {"variant": "dora", "rank": 4}], "lrs": [1e-3]}})
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and config_hash(again) == config_hash(cfg)


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_shipped_presets_load(path):
    load_config(path, env={})


def test_adalora_preset_values():
    cfg = load_config(Path(__file__).parent.parent / "configs" / "adalora_default.json", env={})
    p = cfg.adapter.params
    assert (p["t_i"], p["t_f"], cfg.adapter.rank, p["target_rank"]) == (100, 900, 12, 8)
