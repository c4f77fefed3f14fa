"""
End-to-end tests for learned correctors on the default experiment.

Every test here trains full-size models and is marked slow.
"""
import pathlib

import numpy as np
import pytest

from app.activities import make_dataset, online_seed
from app.archs import build_model
from app.config import load_config
from app.coupler import climatology_compare
from app.trainer import baseline_ridge, evaluate_offline, train

DEFAULT_CONFIG = pathlib.Path(__file__).resolve().parents[2] / "configs" / "default.cfg"
VARIANTS = ("unet", "unet_mp", "iunet", "mnm")
TRAIN_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def default_config():
    """Default system and dataset with a shortened, slightly faster training schedule."""
    cfg = load_config(DEFAULT_CONFIG)
    return cfg.model_copy(update={"training": cfg.training.model_copy(update={"epochs": 80, "lr": 1e-3})})


@pytest.fixture(scope="module")
def default_dataset(default_config):
    return make_dataset(default_config)


@pytest.fixture(scope="module")
def trained(default_config, default_dataset):
    """Checkpoint per (variant, seed), trained on first use."""
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            cfg = default_config.with_model(variant=variant)
            model = build_model(cfg.architecture(), seed=seed)
            result = train(model, default_dataset, cfg.training.model_copy(update={"seed": seed}))
            cache[(variant, seed)] = result.checkpoint
        return cache[(variant, seed)]

    return get


@pytest.mark.slow
class TestOfflineSkill:
    """Held-out skill of every variant at a common budget."""

    @pytest.mark.parametrize("seed", TRAIN_SEEDS)
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_beats_ridge(self, variant, seed, default_config, default_dataset, trained):
        """Test R² of the network is at least 0.5 and at least the stencil ridge."""
        _, ridge = baseline_ridge(default_dataset, default_config.training.ridge_lambda)
        report = evaluate_offline(trained(variant, seed), default_dataset)
        r2 = report.tables["x"].r2
        assert r2 is not None
        assert r2 >= 0.5
        assert r2 >= ridge.tables["x"].r2


@pytest.mark.slow
class TestOnlineCorrection:
    """Trained M&M corrector coupled into the biased model."""

    def test_lowers_error_and_stays_finite(self, default_config, trained):
        """Mean percent RMSE change is negative over five seeds; runs last 100+ windows."""
        checkpoint = trained("mnm", 0)
        assert default_config.coupling.horizon_windows >= 100
        assert len(default_config.coupling.seeds) == 5
        changes = []
        for seed in default_config.coupling.seeds:
            runs = online_seed(default_config, seed, checkpoint)
            corrected = runs.records["corrected"]
            assert corrected.horizon == default_config.coupling.horizon_windows
            assert np.all(np.isfinite(corrected.snapshots))
            report = climatology_compare({"control": runs.records["control"], "corrected": corrected}, runs.truth)
            changes.append(report.rows["corrected"].pct_change)
        assert float(np.mean(changes)) < 0.0
