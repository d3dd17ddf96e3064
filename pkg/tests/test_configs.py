"""Configuration dataclasses, flat-dict round-trips, YAML IO, overrides."""

import pytest

from defit import BackboneConfig, HsicConfig, LossWeights, TrainConfig
from defit.configs import (load_train_config, parse_override,
                           save_train_config, train_config_from_flat,
                           train_config_to_flat)
from defit.errors import ConfigError, ParameterError


# ----------------------------------------------------------------- dataclasses

def test_train_config_defaults():
    cfg = TrainConfig()
    assert cfg.shots == 16
    assert cfg.epochs == 10
    assert cfg.batch_size == 4
    assert cfg.learning_rate == 2.6e-6
    assert cfg.lora_rank == 4
    assert cfg.prompt_depth == 3
    assert cfg.prompt_width == 2
    assert cfg.weights.tau == 0.07
    assert cfg.loss_mode == "full"


def test_train_config_validation():
    TrainConfig(epochs=0)          # zero epochs is a legal no-op run
    TrainConfig(learning_rate=0.0)  # zero lr is a legal frozen run
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(epochs=-1)
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(batch_size=0)
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(shots=0)
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(loss_mode="contrastive")
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(prompt_depth=7)  # deeper than the tiny towers
    with pytest.raises((ConfigError, ParameterError)):
        TrainConfig(lora_rank=64)    # rank must stay below tower width


def test_loss_weights_validation():
    LossWeights(alpha_sp=0.0, beta=0.0)
    with pytest.raises((ConfigError, ParameterError)):
        LossWeights(tau=0.0)
    with pytest.raises((ConfigError, ParameterError)):
        LossWeights(alpha_sp=-0.1)
    with pytest.raises((ConfigError, ParameterError)):
        LossWeights(beta=-0.1)


def test_backbone_config_validation():
    with pytest.raises((ConfigError, ParameterError)):
        BackboneConfig(joint_dim=1024)  # larger than the tower widths
    with pytest.raises((ConfigError, ParameterError)):
        BackboneConfig(patch_or_token_count=60)  # not a perfect square
    with pytest.raises((ConfigError, ParameterError)):
        BackboneConfig(image_size=225)  # not divisible by the patch grid
    with pytest.raises((ConfigError, ParameterError)):
        BackboneConfig(n_heads=5)  # must divide both tower widths


def test_backbone_tiny_profile():
    tiny = BackboneConfig.tiny(seed=3)
    assert tiny.seed == 3
    assert tiny.vision_dim == tiny.text_dim == 32
    assert tiny.joint_dim == 16
    assert tiny.vision_layers == tiny.text_layers == 3
    assert tiny.patch_or_token_count == 64
    assert tiny.image_size == 32
    assert tiny.patch_grid ** 2 == tiny.patch_or_token_count
    assert tiny.image_size % tiny.patch_grid == 0


# ----------------------------------------------------------------- flat dicts

def test_flat_round_trip():
    cfg = TrainConfig(shots=8, epochs=2, lora_scale=256.0,
                      weights=LossWeights(alpha_sp=1.0, beta=0.25),
                      hsic=HsicConfig(min_class_count=3),
                      backbone=BackboneConfig.tiny(seed=5))
    flat = train_config_to_flat(cfg)
    assert flat["shots"] == 8
    assert flat["weights.alpha_sp"] == 1.0
    assert flat["hsic.min_class_count"] == 3
    assert flat["backbone.seed"] == 5
    rebuilt = train_config_from_flat(flat)
    assert rebuilt == cfg


def test_flat_completion_from_base():
    base = TrainConfig(shots=8, epochs=2)
    rebuilt = train_config_from_flat({"learning_rate": 1e-4}, base=base)
    assert rebuilt.learning_rate == 1e-4
    assert rebuilt.shots == 8       # inherited from base
    assert rebuilt.epochs == 2


def test_flat_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        train_config_from_flat({"sohts": 8})
    with pytest.raises(ConfigError):
        train_config_from_flat({"weights.gamma": 1.0})
    with pytest.raises(ConfigError):
        train_config_from_flat({"nested.weights.alpha_sp": 1.0})


def test_parse_override_typing():
    assert parse_override("shots=8") == ("shots", 8)
    assert parse_override("learning_rate=2.6e-6") == ("learning_rate", 2.6e-6)
    assert parse_override("cosine_lr=true") == ("cosine_lr", True)
    assert parse_override("loss_mode=ce_only") == ("loss_mode", "ce_only")
    assert parse_override("weights.alpha_sp=1.5") == ("weights.alpha_sp", 1.5)
    key, value = parse_override("out_dir=null")
    assert value is None
    with pytest.raises(ConfigError):
        parse_override("no_equals_sign")


# ----------------------------------------------------------------- YAML IO

def test_save_load_yaml_round_trip(tmp_path):
    cfg = TrainConfig(shots=4, epochs=1, loss_mode="ce_only",
                      weights=LossWeights(alpha_sp=1.0),
                      backbone=BackboneConfig.tiny(seed=9))
    path = tmp_path / "cfg.yaml"
    save_train_config(cfg, path)
    assert load_train_config(path) == cfg


def test_load_yaml_with_overrides(tmp_path):
    cfg = TrainConfig(shots=4, epochs=1)
    path = tmp_path / "cfg.yaml"
    save_train_config(cfg, path)
    loaded = load_train_config(path, overrides={"epochs": 3,
                                                "weights.alpha_sp": 2.0})
    assert loaded.epochs == 3               # override wins over the file
    assert loaded.shots == 4                # file value survives
    assert loaded.weights.alpha_sp == 2.0


def test_load_yaml_unknown_file(tmp_path):
    with pytest.raises(ConfigError):
        load_train_config(tmp_path / "missing.yaml")


def test_load_yaml_bad_content(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_train_config(path)
