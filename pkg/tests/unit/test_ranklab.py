"""
Unit tests for stacked-map rank and upsampler injectivity.
"""
import numpy as np
import pytest

from app.archs import ConvTranspose1d, UpMultiBlock, build_model
from app.errors import LinearizationError, NonFiniteError, ShapeError
from app.ranklab import (
    all_injective,
    format_rank_reports,
    injectivity_report,
    left_inverse_check,
    linearize_branches,
    linearize_upsampler,
    rank_and_rowspace_dim,
    stack_linear_maps,
)
from app.tensorcore import ParameterStore, gelu, pixel_shuffle1d, upsample_linear1d


class TestStackedRank:
    """Rank of the stack against the summed row spaces."""

    def test_identity_pair(self):
        """Two unit rows span the plane and invert exactly."""
        report = rank_and_rowspace_dim(stack_linear_maps([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]))
        assert (report.rank, report.rowspace_dim) == (2, 2)
        assert report.injective
        assert report.residual < 1e-12

    def test_duplicated_rows(self):
        """Repeating one row gives rank one and no left inverse."""
        report = rank_and_rowspace_dim(stack_linear_maps([np.array([[1.0, 1.0]]), np.array([[1.0, 1.0]])]))
        assert (report.rank, report.rowspace_dim) == (1, 1)
        assert not report.injective
        assert report.residual is None
        assert report.verdict == "rank-deficient"

    def test_random_full_rank_stacks(self):
        """Gaussian branches: rank equals the row-space sum and is full."""
        rng = np.random.default_rng(11)
        for _ in range(100):
            maps = [rng.standard_normal((4, 8)) for _ in range(3)]
            report = rank_and_rowspace_dim(stack_linear_maps(maps))
            assert report.rank == report.rowspace_dim == 8
            assert report.monotone and report.branch_nondecreasing
            assert report.injective and report.residual < 1e-8

    def test_random_rank_deficient_stacks(self):
        """Branches sharing a 5-dimensional row space stay at rank 5."""
        rng = np.random.default_rng(12)
        for _ in range(100):
            shared = rng.standard_normal((5, 8))
            maps = [rng.standard_normal((4, 5)) @ shared for _ in range(3)]
            report = rank_and_rowspace_dim(stack_linear_maps(maps))
            assert report.rank == report.rowspace_dim == 5
            assert report.monotone and report.branch_nondecreasing
            assert not report.injective

    def test_orthonormal_columns_invert_exactly(self, rng):
        q, _ = np.linalg.qr(rng.standard_normal((12, 8)))
        injective, residual = left_inverse_check(stack_linear_maps([q[:4], q[4:8], q[8:]]))
        assert injective
        assert residual < 1e-12

    def test_ragged_maps_rejected(self):
        with pytest.raises(ShapeError):
            stack_linear_maps([np.ones((2, 3)), np.ones((2, 4))])
        with pytest.raises(ShapeError):
            stack_linear_maps([])

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            rank_and_rowspace_dim(stack_linear_maps([np.array([[np.inf, 0.0]])]))


class TestLinearization:
    """Jacobians of upsampling blocks from batched unit probes."""

    def test_pixel_shuffle_is_permutation(self):
        jac = linearize_upsampler(lambda x, ctx: pixel_shuffle1d(x, 2), (4, 5))
        assert jac.shape == (20, 20)
        assert np.array_equal(np.sort(jac, axis=None)[-20:], np.ones(20))
        assert np.all(jac.sum(axis=0) == 1.0) and np.all(jac.sum(axis=1) == 1.0)

    def test_interpolation_rows_sum_to_one(self):
        jac = linearize_upsampler(lambda x, ctx: upsample_linear1d(x, 2), (1, 6))
        assert jac.shape == (12, 6)
        assert np.allclose(jac.sum(axis=1), 1.0, atol=1e-14)

    def test_nonlinear_block_rejected(self):
        with pytest.raises(LinearizationError):
            linearize_upsampler(lambda x, ctx: gelu(x), (2, 3))

    def test_branch_jacobians_stack_to_block(self, rng):
        """The fused block is the fusion map applied to the stacked branches."""
        block = UpMultiBlock(ParameterStore(), "up", 4, 4, rng, "zeros")
        branches = linearize_branches(block, (4, 3))
        assert [b.shape for b in branches] == [(24, 12)] * 3
        whole = linearize_upsampler(block, (4, 3))
        assert whole.shape == (24, 12)


class TestUpsamplerInjectivity:
    """Verdicts for decoder upsamplers."""

    @pytest.mark.parametrize("seed", range(10))
    def test_fresh_multi_branch_block_injective(self, seed):
        block = UpMultiBlock(ParameterStore(), "up", 8, 8, np.random.default_rng(seed), "zeros")
        report = rank_and_rowspace_dim(stack_linear_maps(linearize_branches(block, (8, 5))))
        assert report.n == 40 and report.m == 240
        assert report.injective and report.consistent

    def test_shuffle_branch_alone_keeps_injectivity(self, rng):
        """Zeroed transpose and interpolation branches leave the block injective."""
        block = UpMultiBlock(ParameterStore(), "up", 8, 8, rng, "zeros")
        for layer in (block.transpose, block.interp3, block.interp5, block.interp7, block.interp_fuse):
            layer.weight.data = np.zeros_like(layer.weight.data)
            layer.bias.data = np.zeros_like(layer.bias.data)
        report = rank_and_rowspace_dim(stack_linear_maps(linearize_branches(block, (8, 5))))
        assert report.rank == 40
        assert report.injective

    def test_narrow_transpose_conv_is_rank_deficient(self, rng):
        """Eight channels squeezed into two outputs per doubled site cannot be inverted."""
        narrow = ConvTranspose1d(ParameterStore(), "narrow", 8, 2, 2, 2, rng)
        report = rank_and_rowspace_dim(stack_linear_maps(linearize_branches(narrow, (8, 5))), level=1)
        assert report.rank <= 20 < report.n
        assert not report.injective
        text = format_rank_reports([report])
        assert "verdict=rank-deficient" in text
        assert text.rstrip().endswith("summary=fail levels=1")

    @pytest.mark.parametrize("variant", ["mnm", "unet"])
    def test_fresh_model_levels(self, toy_arch, variant):
        """Every decoder level of a fresh model is injective."""
        model = build_model(toy_arch(variant), seed=0)
        reports = injectivity_report(model)
        assert [r.level for r in reports] == [3, 4]
        assert all_injective(reports)
        assert format_rank_reports(reports).rstrip().endswith("summary=pass levels=2")

    def test_small_mnm_preset_injective(self):
        from app.archs import preset_config

        model = build_model(preset_config("mnm", "small"), seed=1)
        assert all_injective(injectivity_report(model))
