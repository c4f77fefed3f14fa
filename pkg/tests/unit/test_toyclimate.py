"""
Unit tests for the two-scale system, nudged runs and datasets.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import BlowUpError, ConfigError, DegenerateChannelError, HorizonError, ShapeError, SplitOverlapError
from app.toyclimate import (
    DatasetConfig,
    SystemConfig,
    build_dataset,
    check_finite,
    compute_stats,
    denormalize,
    forcing_at,
    metadata_at,
    normalize,
    nudging_tendency,
    run_nudged,
    run_truth,
    step_free,
    step_truth,
)
from app.coupler import run_controlled


class TestSystemConfig:
    """Validation and derived settings."""

    def test_defaults(self):
        cfg = SystemConfig()
        assert cfg.relaxation == pytest.approx(2 * 6 * 0.005)
        assert cfg.stride == 1
        assert cfg.site_mask().sum() == cfg.sites

    def test_mask_sites_from_text(self):
        cfg = SystemConfig(sites=8, mask_sites="1, 3")
        assert cfg.mask_sites == (1, 3)
        assert cfg.site_mask().tolist() == [1, 0, 1, 0, 1, 1, 1, 1]

    def test_mask_site_out_of_range(self):
        with pytest.raises(ValidationError):
            SystemConfig(sites=8, mask_sites=(8,))

    def test_reference_stride_must_divide_window(self):
        """Every window boundary lands on an archived reference sample."""
        assert SystemConfig(window=6, reference_stride=3).stride == 3
        with pytest.raises(ValidationError):
            SystemConfig(window=6, reference_stride=4)

    def test_spinup_shorter_than_transient(self):
        with pytest.raises(ValidationError):
            SystemConfig(spinup_steps=10, transient_steps=20)

    def test_periodic_forcing(self):
        cfg = SystemConfig(forcing_amplitude=2.0, forcing_period=4.0)
        assert forcing_at(cfg, 1.0) == pytest.approx(12.0)
        assert metadata_at(cfg, 3.0).values[2, 0] == pytest.approx(8.0)


class TestDynamics:
    """Integrators of the reference and the biased model."""

    def test_uniform_forcing_state_is_fixed(self):
        """X = F at every site has zero one-scale tendency."""
        cfg = SystemConfig(sites=8)
        x = np.full(8, cfg.forcing)
        assert np.array_equal(step_free(x, cfg), x)

    def test_uncoupled_reference_matches_biased_model(self, rng):
        """With h = 0 the slow half of the reference is the one-scale model."""
        cfg = SystemConfig(sites=8, fast_per_site=3, coupling_h=0.0)
        state = np.concatenate([cfg.forcing + rng.standard_normal(8), rng.standard_normal(24)])
        x = state[:8].copy()
        for s in range(50):
            state = step_truth(state, cfg, t=s * cfg.dt)
            x = step_free(x, cfg, t=s * cfg.dt)
        assert np.allclose(state[:8], x, rtol=0.0, atol=1e-12)

    def test_extra_tendency_shifts_state(self):
        """A constant extra tendency on the fixed point relaxes as 2 (1 - exp(-t))."""
        cfg = SystemConfig(sites=8)
        x = np.full(8, cfg.forcing)
        expected = x + 2.0 * (1.0 - np.exp(-cfg.dt))
        assert np.allclose(step_free(x, cfg, extra=np.full(8, 2.0)), expected, rtol=0.0, atol=1e-12)

    def test_wrong_state_length(self):
        cfg = SystemConfig(sites=8, fast_per_site=2)
        with pytest.raises(ShapeError):
            step_truth(np.zeros(8), cfg)
        with pytest.raises(ShapeError):
            step_free(np.zeros(24), cfg)

    def test_blow_up_reported_with_step(self):
        with pytest.raises(BlowUpError) as info:
            check_finite(np.array([1.0, np.nan]), 17, "control")
        assert info.value.step == 17
        assert info.value.as_record()["provenance"] == "control"

    def test_unstable_timestep_blows_up(self):
        cfg = SystemConfig(sites=8, fast_per_site=2, dt=5.0, spinup_steps=0, transient_steps=0)
        with np.errstate(all="ignore"), pytest.raises(BlowUpError):
            run_controlled(cfg, horizon=50, seed=0, initial=np.linspace(-50.0, 50.0, 8))


class TestNudging:
    """Relaxation tendencies and nudged runs."""

    def test_tendency_formula(self):
        out = nudging_tendency(np.array([1.0, 2.0]), np.array([3.0, 2.0]), 0.5)
        assert out.tolist() == [4.0, 0.0]

    def test_non_positive_timescale(self):
        with pytest.raises(ConfigError):
            nudging_tendency(np.zeros(2), np.zeros(2), 0.0)

    def test_reference_archive_interpolation(self, toy_system):
        cfg = toy_system.model_copy(update={"reference_stride": toy_system.window})
        truth = run_truth(cfg, 4, seed=0)
        w = cfg.window
        assert np.array_equal(truth.reference_at(2 * w), truth.record.snapshots[2, 0])
        mid = truth.reference_at(w // 2)
        assert np.allclose(mid, 0.5 * (truth.reference[0] + truth.reference[1]))
        with pytest.raises(HorizonError):
            truth.reference_at(4 * w + 1)

    def test_window_mean_of_per_step_tendencies(self, toy_system):
        """Each pair's tendency is the mean of its window's per-step tendencies."""
        truth = run_truth(toy_system, 5, seed=0)
        trace = []
        record, pairs = run_nudged(toy_system, truth, 5, trace=trace)
        w = toy_system.window
        assert len(trace) == 5 * w
        for j, pair in enumerate(pairs):
            assert np.array_equal(pair.tendency[0], np.stack(trace[j * w : (j + 1) * w]).mean(axis=0))
            assert np.array_equal(pair.state[0], record.snapshots[j, 0])
        assert record.corrections.shape == (5, 1, toy_system.sites)

    def test_exact_model_needs_no_nudging(self):
        """Without slow-fast coupling the archived tendencies vanish against the coupled scale."""
        coupled = SystemConfig(sites=16, fast_per_site=4, spinup_steps=200, transient_steps=0)
        _, reference_pairs = run_nudged(coupled, run_truth(coupled, 10, seed=3), 10)
        scale = max(float(np.max(np.abs(p.tendency))) for p in reference_pairs)

        exact = coupled.model_copy(update={"coupling_h": 0.0})
        _, pairs = run_nudged(exact, run_truth(exact, 10, seed=3), 10)
        worst = max(float(np.max(np.abs(p.tendency))) for p in pairs)
        assert scale > 0.0
        assert worst < 5e-3 * scale
        assert worst < 1e-10

    def test_masked_sites_get_zero_tendency(self):
        cfg = SystemConfig(sites=16, fast_per_site=4, spinup_steps=200, transient_steps=0, mask_sites=(0, 5))
        truth = run_truth(cfg, 4, seed=1)
        _, pairs = run_nudged(cfg, truth, 4)
        for p in pairs:
            assert np.all(p.tendency[0, [0, 5]] == 0.0)
            assert p.metadata.values[3, 0] == 0.0

    def test_horizon_beyond_archive(self, toy_system):
        truth = run_truth(toy_system, 3, seed=0)
        with pytest.raises(HorizonError):
            run_nudged(toy_system, truth, 4)

    def test_nudging_tracks_reference(self, toy_system):
        """Nudged runs cut the free model's error against the reference by at least 80%."""
        for seed in range(5):
            truth = run_truth(toy_system, 200, seed=seed)
            nudged, _ = run_nudged(toy_system, truth, 200)
            control = run_controlled(toy_system, 200, seed, initial=truth.record.snapshots[0, 0])
            ref = truth.record.snapshots
            nudged_rmse = np.sqrt(np.mean((nudged.snapshots - ref) ** 2))
            control_rmse = np.sqrt(np.mean((control.snapshots - ref) ** 2))
            assert nudged_rmse <= 0.2 * control_rmse


class TestNormalization:
    """Range statistics."""

    def test_round_trip(self, rng):
        states = rng.standard_normal((10, 1, 8)) * 3 + 2
        tends = rng.standard_normal((10, 1, 8))
        stats = compute_stats(states, tends)
        for kind, arr in (("state", states), ("tendency", tends)):
            assert np.allclose(denormalize(normalize(arr, stats, kind), stats, kind), arr, atol=1e-12)

    def test_states_map_onto_unit_interval(self, rng):
        states = rng.standard_normal((10, 1, 8))
        stats = compute_stats(states, rng.standard_normal((10, 1, 8)))
        z = normalize(states, stats)
        assert z.min() == pytest.approx(-1.0) and z.max() == pytest.approx(1.0)

    def test_tendency_range_is_symmetric(self, rng):
        """Zero tendency maps to zero."""
        stats = compute_stats(rng.standard_normal((5, 1, 8)), rng.standard_normal((5, 1, 8)) + 3.0)
        assert stats.tend_min[0] == -stats.tend_max[0]
        assert normalize(np.zeros((1, 1, 8)), stats, "tendency") == pytest.approx(np.zeros((1, 1, 8)))

    def test_constant_channel(self, rng):
        with pytest.raises(DegenerateChannelError):
            compute_stats(np.ones((4, 1, 8)), rng.standard_normal((4, 1, 8)))
        with pytest.raises(DegenerateChannelError):
            compute_stats(rng.standard_normal((4, 1, 8)), np.zeros((4, 1, 8)))


class TestDataset:
    """Splits and statistics."""

    def test_splits_and_shapes(self, toy_dataset, toy_split, toy_system):
        assert len(toy_dataset.train) == 2 * toy_split.windows_per_epoch
        assert len(toy_dataset.test) == toy_split.windows_per_epoch
        assert toy_dataset.train.states.shape[1:] == (1, toy_system.sites)
        assert toy_dataset.train.metadata.shape[1:] == (4, toy_system.sites)
        assert set(toy_dataset.test.epochs.tolist()) == {2}

    def test_statistics_come_from_training_epochs(self, toy_dataset):
        train = toy_dataset.train
        assert train.states.min() == pytest.approx(-1.0)
        assert train.states.max() == pytest.approx(1.0)
        assert np.abs(train.tendencies).max() == pytest.approx(1.0)

    def test_epoch_start_times_are_disjoint(self, toy_dataset):
        assert toy_dataset.train.t0.max() < toy_dataset.test.t0.min()

    def test_overlapping_split(self, toy_archive):
        split = DatasetConfig(epochs=3, windows_per_epoch=12, gap_windows=2, train_epochs=(0, 1), test_epochs=(1,))
        with pytest.raises(SplitOverlapError):
            build_dataset(toy_archive.pairs, split)

    def test_missing_epoch(self, toy_archive):
        split = DatasetConfig(epochs=3, windows_per_epoch=12, gap_windows=2, train_epochs=(0,), test_epochs=(5,))
        with pytest.raises(ConfigError):
            build_dataset(toy_archive.pairs, split)

    def test_subsample_recorded(self, toy_archive):
        pairs = dict(toy_archive.pairs)
        split = DatasetConfig(epochs=3, windows_per_epoch=12, gap_windows=2, subsample=2)
        dataset = build_dataset(pairs, split)
        assert dataset.subsample == 2
