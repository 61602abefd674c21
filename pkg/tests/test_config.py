import json

import pytest

from waterlog.config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config


def test_defaults_follow_training_recipe():
    s = RunConfig().s2match
    assert (s.tau, s.tau_s, s.lambda_u, s.lr0, s.epochs) == (0.95, 0.8, 1.0, 2e-4, 30)
    assert (s.batch_labeled, s.batch_unlabeled, s.gamma_cap) == (2, 2, 0.996)


def test_roundtrip_through_dict():
    cfg = RunConfig()
    assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_hash_stable_and_sensitive():
    a = load_config(None, ["s2match.tau_s=0.65"])
    b = load_config(None, ["s2match.tau_s=0.65"])
    c = load_config(None, ["s2match.tau_s=0.8"])
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 12


def test_overrides_parse_json_values():
    d = apply_overrides({}, ["a.b=3", "a.c=true", "a.d=[1, 2]", "e=text"])
    assert d == {"a": {"b": 3, "c": True, "d": [1, 2]}, "e": "text"}


def test_override_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, ["a.b=2"])


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match="s2match"):
        config_from_dict({"s2match": {"taus": 0.9}})


def test_invalid_values_wrapped():
    with pytest.raises(ConfigError, match="s2match"):
        load_config(None, ["s2match.tau_s=0.97"])
    with pytest.raises(ConfigError):
        load_config(None, ["backbone.stage_depths=3"])
    with pytest.raises(ConfigError):
        load_config(None, ["report_client.kind=carrier-pigeon"])


def test_load_from_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"s2match": {"epochs": 3}}))
    assert load_config(p, ["s2match.seed=4"]).s2match.epochs == 3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(p)
