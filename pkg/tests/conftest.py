"""
Pytest configuration and shared fixtures.
"""
import pathlib

import numpy as np
import pytest
import structlog

from app.archs import preset_config
from app.config import ExperimentConfig, parse_config_text
from app.toyclimate import (
    Dataset,
    DatasetConfig,
    DatasetSplit,
    NormalizationStats,
    SystemConfig,
    build_dataset,
    generate_epochs,
)

REPO_ROOT = pathlib.Path(__file__).resolve().parents[1]

TINY_CONFIG = """
[system]
sites = 16
fast_per_site = 4
window = 6
spinup_steps = 100
transient_steps = 50

[dataset]
epochs = 3
windows_per_epoch = 8
gap_windows = 2
train_epochs = 0, 1
test_epochs = 2

[model]
variant = mnm
preset = toy
depth = 2
dropout = 0.1

[training]
epochs = 2
batch_size = 8

[coupling]
window = 6
horizon_windows = 4
seeds = 1, 2

[experiment]
name = tiny
seed = 0
"""


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long simulations and training runs")


@pytest.fixture(autouse=True)
def reset_logging():
    """Undo any structlog configuration a test or a CLI dispatch installed."""
    yield
    structlog.reset_defaults()


@pytest.fixture
def rng():
    """Fresh deterministic generator per test."""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_system():
    """Two-scale system small enough for unit tests."""
    return SystemConfig(sites=16, fast_per_site=4, spinup_steps=300, transient_steps=100)


@pytest.fixture(scope="session")
def toy_split():
    """Three short epochs: two for training, one held out."""
    return DatasetConfig(epochs=3, windows_per_epoch=12, gap_windows=2)


@pytest.fixture(scope="session")
def toy_archive(toy_system, toy_split):
    """Reference run and nudged pairs for every epoch."""
    return generate_epochs(toy_system, toy_split, seed=0)


@pytest.fixture(scope="session")
def toy_dataset(toy_system, toy_split, toy_archive):
    """Normalized dataset built from the toy archive."""
    return build_dataset(toy_archive.pairs, toy_split, mask=toy_system.site_mask(), window=toy_system.window, dt=toy_system.dt)


@pytest.fixture
def toy_arch():
    """Factory for toy-preset architectures on a 16-site grid."""

    def make(variant="unet", **fields):
        fields.setdefault("length", 16)
        fields.setdefault("dropout", 0.0)
        return preset_config(variant, "toy", **fields)

    return make


@pytest.fixture
def identity_stats():
    """Statistics mapping [-1, 1] onto itself for one channel."""
    one = np.array([1.0])
    return NormalizationStats(("x",), -one, one.copy(), -one, one.copy())


@pytest.fixture
def synthetic_dataset(identity_stats):
    """Factory for datasets with hand-made states and tendencies."""

    def make(train_states, train_targets, test_states=None, test_targets=None, metadata_channels=4):
        test_states = train_states if test_states is None else test_states
        test_targets = train_targets if test_targets is None else test_targets

        def split(states, targets, epoch):
            n, _, length = states.shape
            return DatasetSplit(
                states=np.asarray(states, dtype=np.float64),
                tendencies=np.asarray(targets, dtype=np.float64),
                metadata=np.zeros((n, metadata_channels, length)),
                epochs=np.full(n, epoch, dtype=np.int64),
                t0=np.arange(n, dtype=np.float64),
            )

        return Dataset(
            train=split(train_states, train_targets, 0),
            test=split(test_states, test_targets, 1),
            stats=identity_stats,
            mask=np.ones(train_states.shape[2]),
        )

    return make


@pytest.fixture
def tiny_config_text():
    return TINY_CONFIG


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Pipeline-sized configuration writing under the test's temporary directory."""
    cfg = parse_config_text(TINY_CONFIG)
    return cfg.model_copy(update={"output": cfg.output.model_copy(update={"directory": str(tmp_path / "runs")})})


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path
