import json

import pytest

from tfcal.config import ConfigError, TrainConfig, apply_overrides, load_data_config, load_train_config


def test_defaults_follow_method_settings():
    cfg = TrainConfig()
    assert cfg.calibration.eta == cfg.calibration.tau == 0.5
    assert cfg.calibration.p_cal == 0.5 and cfg.calibration.stage_fraction == 0.7
    assert cfg.aaf.alpha == 0.2 and cfg.aaf.p_aaf == 0.5 and cfg.aaf.mode == "mix"
    assert cfg.optim.weight_decay == 5e-4
    assert cfg.optim.decay_factor == 0.1 and cfg.optim.decay_epoch_fraction == 0.8
    assert cfg.epochs == 40 and cfg.precision == "single"


def test_dict_roundtrip():
    cfg = TrainConfig().replace(**{"aaf.mode": "swap", "seed": 4})
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_unknown_keys_fail_closed(tmp_path):
    with pytest.raises(ConfigError, match="aaf.beta"):
        TrainConfig.from_dict({"aaf": {"beta": 1}})
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(TrainConfig().to_dict(), ["calibration.strength=1"])
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"version": 2})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"precision": "half"})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"calibration": {"eta": 2.0}})


def test_overrides_apply_after_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"version": 1, "epochs": 7, "optim": {"lr_head": 0.3}}))
    cfg = load_train_config(path, ["epochs=9", "aaf.enabled=false", "dataset=elsewhere"])
    assert cfg.epochs == 9 and cfg.optim.lr_head == 0.3
    assert cfg.aaf.enabled is False and cfg.dataset == "elsewhere"
    with pytest.raises(ConfigError, match="key=value"):
        load_train_config(path, ["epochs"])


def test_precision_env(monkeypatch):
    monkeypatch.setenv("TFCAL_PRECISION", "double")
    assert load_train_config().precision == "double"
    monkeypatch.setenv("TFCAL_PRECISION", "quad")
    with pytest.raises(ConfigError):
        load_train_config()


def test_data_config(tmp_path):
    spec = load_data_config(None, ["n_per_cell=3"])
    assert spec.n_per_cell == 3 and len(spec.domains) == 4
    path = tmp_path / "d.json"
    path.write_text(json.dumps({"version": 1, "colour": "red"}))
    with pytest.raises(ConfigError, match="colour"):
        load_data_config(path)
