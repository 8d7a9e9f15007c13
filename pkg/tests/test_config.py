import pytest

from hrlcap.config import (PRESETS, Config, ModelConfig, TrainConfig, build_config, dump_config,
                           load_config, parse_config_text, parse_schedule)
from hrlcap.errors import ContractError, LoadError


def test_defaults():
    cfg = Config().validate()
    assert cfg.model.goal_dim == 16 and cfg.train.gamma == 0.95 and cfg.train.sigma == 0.1
    assert cfg.train.clip == 10.0 and cfg.train.rho == 0.95 and cfg.train.eps == 1e-6


def test_precedence_file_env_override(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("goal_dim = 32  # wider goals\nbatch = 8\n\nsigma = 0.2\n")
    cfg = load_config(path, overrides={"sigma": 0.3}, env={"HRLCAP_BATCH": "4", "OTHER": "x"})
    assert cfg.model.goal_dim == 32 and cfg.train.batch == 4 and cfg.train.sigma == 0.3


def test_preset_fills_unset_keys():
    cfg = build_config({"preset": "synthetic", "goal_dim": "64"}, env={})
    assert cfg.model.goal_dim == 64
    assert cfg.model.worker_hidden == PRESETS["synthetic"]["worker_hidden"]
    assert cfg.train.eps == 1e-4
    with pytest.raises(ContractError, match="preset"):
        build_config({"preset": "nope"}, env={})


def test_bad_values():
    with pytest.raises(ContractError, match="unknown"):
        build_config({"gaol_dim": "3"}, env={})
    with pytest.raises(ContractError):
        build_config({"goal_dim": "abc"}, env={})
    with pytest.raises(ContractError, match="gamma"):
        build_config(overrides={"gamma": 1.5}, env={})
    with pytest.raises(ContractError):
        ModelConfig(dropout=1.0).validate()
    with pytest.raises(ContractError):
        ModelConfig(goal_dim=0).validate()
    with pytest.raises(LoadError):
        parse_config_text("goal_dim 3")
    with pytest.raises(LoadError):
        load_config("/nonexistent/cfg")


def test_bool_coercion():
    assert build_config({"rl_update_encoders": "no"}, env={}).train.rl_update_encoders is False
    assert build_config({"length_norm": "yes"}, env={}).model.length_norm is True


def test_schedule():
    assert parse_schedule("W:1,M:1") == [("W", 1), ("M", 1)]
    assert parse_schedule("W:3, M:2") == [("W", 3), ("M", 2)]
    for bad in ("X:1", "W:0", "W1", ""):
        with pytest.raises(ContractError):
            parse_schedule(bad)
    with pytest.raises(ContractError):
        TrainConfig(schedule="M").validate()


def test_dump_round_trip(tmp_path):
    cfg = build_config({"preset": "synthetic"}, env={})
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path, env={}).to_dict() == cfg.to_dict()
    assert Config.from_dict(cfg.to_dict()) == cfg
