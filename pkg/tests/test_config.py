import json

import pytest

from protodiff import config


def test_defaults_validate_and_hash_stable():
    cfg = config.ExperimentConfig().validate()
    assert cfg.hash() == config.ExperimentConfig().hash()
    assert cfg.unet.cond_dim == cfg.train.d_t + cfg.proto.dim == 256
    assert (cfg.proto.epochs, cfg.proto.batch_size, cfg.proto.learning_rate) == (20, 64, 1e-3)


def test_overrides():
    cfg = config.apply_overrides(config.ExperimentConfig(),
                                 ["train.steps=200", "proto.dim=64", "unet.cond_dim=192",
                                  "unet.ch_mult=[1,2]", "train.embedding_mode=proto-frozen"])
    cfg.validate()
    assert cfg.train.steps == 200 and cfg.unet.ch_mult == (1, 2) and cfg.train.embedding_mode == "proto-frozen"
    assert cfg.hash() != config.ExperimentConfig().hash()
    with pytest.raises(config.ConfigError):
        config.apply_overrides(cfg, ["train.nope=1"])
    with pytest.raises(config.ConfigError):
        config.apply_overrides(cfg, ["train.steps"])


def test_cross_field_validation():
    with pytest.raises(config.ConfigError, match="cond_dim"):
        config.apply_overrides(config.ExperimentConfig(), ["proto.dim=64"]).validate()
    with pytest.raises(config.ConfigError, match="image_size"):
        config.apply_overrides(config.ExperimentConfig(), ["dataset.image_size=32"]).validate()
    with pytest.raises(config.ConfigError, match="path"):
        config.apply_overrides(config.ExperimentConfig(), ["dataset.source=file"]).validate()


def test_json_round_trip(tmp_path):
    cfg = config.apply_overrides(config.ExperimentConfig(), ["seed=4"])
    config.dump(cfg, tmp_path / "c.json")
    back = config.load(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()
    (tmp_path / "bad.json").write_text(json.dumps({"train": {"bogus": 1}}))
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "broken.json")
