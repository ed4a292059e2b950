"""Тесты конфигурации запуска и переменных окружения."""
import math
import os

import pytest

from app.core.config import Config
from app.core.exceptions import ConfigError
from app.models.config import RunConfig, adapt_hash, config_hash, data_hash


def test_load_small_config(small_config):
    assert small_config.seed == 7
    assert small_config.data.n_items == 40
    assert small_config.adapt.teacher_temp_mode == "divide"
    assert small_config.rec.model == "seq"
    assert small_config.eval.k == 10


def test_defaults_without_file():
    cfg = RunConfig.load()
    assert cfg.seed == 42
    assert cfg.adapt.tau == pytest.approx(0.07)
    assert cfg.adapt.target_sites == ["q_proj", "k_proj"]
    assert cfg.data.misalignment_rotation_angle == pytest.approx(math.pi / 2)
    assert cfg.eval.tail_threshold == 4


def test_section_seed_offsets(small_config):
    assert small_config.data.seed == 7
    assert small_config.encoder.seed == 7
    assert small_config.adapt.seed == 8
    assert small_config.rec.seed == 9
    assert small_config.diagnose.seed == 10


def test_seed_flag_overrides_file(temp_dir):
    path = os.path.join(temp_dir, "c.toml")
    with open(path, "w", encoding="utf-8") as f:
        f.write("seed = 1\n[adapt]\nseed = 100\n")
    assert RunConfig.load(path).adapt.seed == 100
    cfg = RunConfig.load(path, seed=5)
    assert cfg.seed == 5 and cfg.adapt.seed == 6


def test_set_overrides(small_toml):
    cfg = RunConfig.load(small_toml, overrides=["adapt.loss=\"infonce\"", "rec.model=bpr", "adapt.steps=0"])
    assert cfg.adapt.loss == "infonce"
    assert cfg.rec.model == "bpr"
    assert cfg.adapt.steps == 0
    with pytest.raises(ConfigError):
        RunConfig.load(small_toml, overrides=["adapt.steps"])


def test_unknown_key_rejected(temp_dir):
    path = os.path.join(temp_dir, "c.toml")
    with open(path, "w", encoding="utf-8") as f:
        f.write("[adapt]\nlearning_rte = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rte"):
        RunConfig.load(path)


def test_invalid_values(small_toml, temp_dir):
    with pytest.raises(ConfigError, match="n_experts"):
        RunConfig.load(small_toml, overrides=["adapt.rank=5"])
    with pytest.raises(ConfigError):
        RunConfig.load(small_toml, overrides=["adapt.tau=0"])
    with pytest.raises(ConfigError, match="не найден"):
        RunConfig.load(os.path.join(temp_dir, "missing.toml"))
    broken = os.path.join(temp_dir, "broken.toml")
    with open(broken, "w", encoding="utf-8") as f:
        f.write("[adapt\n")
    with pytest.raises(ConfigError, match="TOML"):
        RunConfig.load(broken)


def test_hashes_track_sections(small_toml):
    base = RunConfig.load(small_toml)
    other_rec = RunConfig.load(small_toml, overrides=["rec.epochs=3"])
    other_adapt = RunConfig.load(small_toml, overrides=["adapt.steps=6"])
    assert adapt_hash(base) == adapt_hash(other_rec)
    assert adapt_hash(base) != adapt_hash(other_adapt)
    assert data_hash(base) == data_hash(other_adapt)
    assert config_hash(base.rec) != config_hash(other_rec.rec)
    assert len(data_hash(base)) == 16


def test_env_validation():
    cfg = Config()
    cfg.WORKERS, cfg.LOG_LEVEL, cfg.DEBUG = 0, "INFO", False
    with pytest.raises(ConfigError, match="SDA_WORKERS"):
        cfg.validate()
    cfg.WORKERS, cfg.LOG_LEVEL = 2, "LOUD"
    with pytest.raises(ConfigError, match="SDA_LOG_LEVEL"):
        cfg.validate()
    cfg.LOG_LEVEL = "WARNING"
    cfg.validate()
    assert cfg.log_level == "WARNING"
    cfg.DEBUG = True
    assert cfg.log_level == "DEBUG"
