"""
Unit tests for metadata vectors and FiLM generators.
"""
import numpy as np
import pytest

from app.conditioning import (
    METADATA_CHANNELS,
    FilmGenerator1d,
    build_metadata,
    film_apply,
    film_generate,
    film_invert,
    film_param_count,
    resample_metadata,
)
from app.errors import ShapeError
from app.tensorcore import ParameterStore, Tensor, gradient_check


class TestBuildMetadata:
    """Per-site conditioning channels."""

    def test_channels_and_values(self):
        """Positional encoding, forcing and mask rows in fixed order."""
        mu = build_metadata(8.0, 8, mask=np.array([1, 1, 0, 1, 1, 1, 1, 1], dtype=float))
        assert mu.names == METADATA_CHANNELS
        assert mu.values.shape == (4, 8)
        assert np.allclose(mu.values[0], np.sin(2 * np.pi * np.arange(8) / 8))
        assert np.allclose(mu.values[1], np.cos(2 * np.pi * np.arange(8) / 8))
        assert np.all(mu.values[2] == 8.0)
        assert mu.values[3, 2] == 0.0 and mu.values[3].sum() == 7.0

    def test_scalars_are_appended(self):
        mu = build_metadata(10.0, 6, scalars={"season": 0.5})
        assert mu.names[-1] == "season"
        assert np.all(mu.values[-1] == 0.5)

    def test_duplicate_scalar_rejected(self):
        with pytest.raises(ShapeError):
            build_metadata(10.0, 6, scalars={"forcing": 1.0})

    def test_short_grid_rejected(self):
        with pytest.raises(ShapeError):
            build_metadata(10.0, 3)

    def test_mask_must_be_binary(self):
        with pytest.raises(ShapeError):
            build_metadata(10.0, 4, mask=np.array([1.0, 0.5, 1.0, 1.0]))

    def test_resample(self):
        """Same length is a no-op; other lengths keep names and constants."""
        mu = build_metadata(9.0, 8)
        assert resample_metadata(mu, 8) is mu
        coarse = mu.resample(4)
        assert coarse.values.shape == (4, 4)
        assert coarse.names == mu.names
        assert np.allclose(coarse.values[2], 9.0)


class TestFilm:
    """Generator heads and modulation."""

    def make(self, channels=3, hidden=4, zero_init=True, seed=0):
        store = ParameterStore()
        gen = FilmGenerator1d(store, 0, channels, 4, hidden, np.random.default_rng(seed), zero_init=zero_init)
        return store, gen

    def test_zero_init_is_identity(self, rng):
        """A zero-initialized head leaves features bit-identical."""
        _, gen = self.make()
        params = gen(build_metadata(10.0, 8))
        features = Tensor(rng.standard_normal((1, 3, 8)))
        assert np.array_equal(params.gamma_hat.data, np.zeros((1, 3, 1)))
        assert np.array_equal(film_apply(features, params).data, features.data)

    def test_scale_stays_positive(self):
        """1 + gamma_hat is strictly positive for any generator weights."""
        store, gen = self.make(zero_init=False, seed=3)
        store["film.0.w2"].data *= 50.0
        params = gen(build_metadata(10.0, 8))
        assert np.all(1.0 + params.gamma_hat.data > 0.0)

    def test_invert_recovers_features(self, rng):
        _, gen = self.make(zero_init=False, seed=4)
        params = gen(build_metadata(12.0, 8))
        features = rng.standard_normal((1, 3, 8))
        modulated = film_apply(Tensor(features), params).data
        assert np.allclose(film_invert(modulated, params), features, atol=1e-12)

    def test_param_count(self):
        store, _ = self.make(channels=5, hidden=6)
        assert store.param_count() == film_param_count(5, 4, 6) == 6 * 4 + 6 + 2 * 5 * 6 + 2 * 5

    def test_resamples_metadata_to_level_length(self):
        """Parameters are per channel, broadcast over the level's length."""
        _, gen = self.make(zero_init=False)
        params = gen(build_metadata(10.0, 16), length=4)
        assert params.gamma_hat.shape == (1, 3, 1)

    def test_missing_level(self):
        store, _ = self.make()
        with pytest.raises(ShapeError):
            film_generate(build_metadata(10.0, 8), 7, store)

    def test_channel_mismatch(self, rng):
        _, gen = self.make(channels=3)
        params = gen(build_metadata(10.0, 8))
        with pytest.raises(ShapeError):
            film_apply(Tensor(rng.standard_normal((1, 2, 8))), params)

    def test_generator_gradients(self, rng):
        """Gradients through generator weights match finite differences."""
        store, gen = self.make(zero_init=False, seed=5)
        mu = Tensor(rng.standard_normal((2, 4, 8)))
        features = Tensor(rng.standard_normal((2, 3, 8)))
        report = gradient_check(lambda: film_apply(features, gen(mu)), store.parameters(), samples=32)
        assert report.passed, report.max_rel_error
