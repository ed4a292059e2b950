import os
import sys
import tempfile


# Абсолютный путь к корневой директории проекта, чтобы `import app...`
# работал при запуске pytest из любого места.
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))

if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

import pytest  # noqa: E402

from app.models.config import RunConfig  # noqa: E402


# Уменьшенный конфиг: весь конвейер проходит за секунды
SMALL_TOML = """
seed = 7

[data]
n_items = 40
n_users = 30
n_clusters = 4
n_tokens = 4
feature_dim = 6
latent_dim = 4
min_sequence_length = 4
max_sequence_length = 8
target_tail_fraction = 0.3

[encoder]
n_layers = 2
hidden_dim = 16
n_tokens = 4
input_dim = 6
d_m = 8

[adapt]
batch_size = 8
steps = 5
learning_rate = 1e-2
rank = 4
n_experts = 2
gate_dim = 4
teacher_temp_mode = "divide"
log_every = 1

[rec]
d_r = 8
epochs = 2
batch_size = 32
seq_batch_size = 8
max_len = 10
n_negatives = 5

[diagnose]
n_seeds = 2
probe_batch_size = 8
adapt_steps = 2
"""


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmp:
        yield tmp


@pytest.fixture
def small_toml(temp_dir):
    path = os.path.join(temp_dir, "small.toml")
    with open(path, "w", encoding="utf-8") as f:
        f.write(SMALL_TOML)
    return path


@pytest.fixture
def small_config(small_toml) -> RunConfig:
    return RunConfig.load(small_toml)


@pytest.fixture
def small_dataset(small_config):
    from app.services.synthetic import generate_with_truth
    return generate_with_truth(small_config.data)


@pytest.fixture
def small_encoder(small_config):
    from app.services.backbone import FrozenEncoder
    return FrozenEncoder(small_config.encoder)
