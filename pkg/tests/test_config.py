import pytest

from clsa.config import ConfigError, TrainConfig, load_config, save_config


def test_defaults_and_scaled_lr():
    cfg = TrainConfig()
    assert (cfg.base_lr, cfg.weight_decay, cfg.sgd_momentum) == (0.03, 1e-4, 0.9)
    assert (cfg.loss.tau, cfg.loss.beta) == (0.2, 1.0)
    assert cfg.replace(batch_size=256).lr == 0.03
    assert cfg.replace(batch_size=512).lr == pytest.approx(0.06)


def test_yaml_round_trip_and_hash(tmp_path):
    cfg = TrainConfig().with_overrides({"loss.mode": "baseline", "strong.crop_sizes": [16, 24], "epochs": 3})
    path = save_config(cfg, tmp_path / "c.yaml")
    back = load_config(path)
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert back.strong.crop_sizes == (16, 24)
    assert cfg.hash() != TrainConfig().hash()


@pytest.mark.parametrize("data,field", [
    ({"bogus": 1}, "bogus"),
    ({"loss": {"temprature": 1}}, "loss.temprature"),
    ({"batch_size": "many"}, "batch_size"),
    ({"batch_size": 2.5}, "batch_size"),
    ({"arch": {"depths": 3}}, "arch.depths"),
    ({"weak": 5}, "weak"),
    ({"exempt_norm_bias": "yes"}, "exempt_norm_bias"),
])
def test_invalid_fields_are_named(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        TrainConfig.from_dict(data)


@pytest.mark.parametrize("data", [
    {"batch_size": 0}, {"base_lr": -1}, {"key_momentum": 1.5}, {"batch_size": 512, "bank_size": 256},
    {"loss": {"mode": "other"}}, {"strong": {"strength": 0}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(data)


def test_overrides_reject_unknown_keys():
    with pytest.raises(ConfigError, match="loss.nope"):
        TrainConfig().with_overrides({"loss.nope": 1})
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides({"epochs.sub": 1})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")


def test_optional_ddm_temperature():
    cfg = TrainConfig.from_dict({"loss": {"tau_ddm": None}})
    assert cfg.loss.ddm_tau == cfg.loss.tau
    assert TrainConfig.from_dict({"loss": {"tau_ddm": 0.5}}).loss.ddm_tau == 0.5
