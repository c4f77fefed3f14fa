"""
Unit tests for the tensor core: gradients, adjoints, resampling and parameters.
"""
import numpy as np
import pytest

from app.errors import MissingGradientError, NonFiniteError, ShapeError
from app.tensorcore import (
    OptimizerState,
    ParameterStore,
    Tensor,
    adam_step,
    affine,
    concat,
    conv1d,
    conv_transpose1d,
    dropout,
    elementwise_structural,
    film_modulate,
    gelu,
    gradient_check,
    inner,
    interpolate_linear1d,
    mean_length,
    mse_loss,
    normalize_batch,
    pixel_shuffle1d,
    pixel_unshuffle1d,
    pool1d,
    relu,
    softplus_residual,
    subsample1d,
)


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def assert_grad(fn, inputs, tolerance=1e-6):
    report = gradient_check(fn, inputs, tolerance=tolerance, samples=24)
    assert report.passed, f"max relative error {report.max_rel_error:.3e}"


class TestGradients:
    """Reverse-mode gradients against central differences."""

    @pytest.mark.parametrize("padding_mode", ["zeros", "circular"])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv1d(self, rng, padding_mode, stride):
        """conv1d gradients for input, weight and bias."""
        x, w, b = leaf(rng, 2, 3, 12), leaf(rng, 4, 3, 3), leaf(rng, 4)
        assert_grad(lambda: conv1d(x, w, b, stride=stride, padding=1, padding_mode=padding_mode), [x, w, b])

    def test_conv_transpose1d(self, rng):
        """Transposed convolution gradients."""
        x, w, b = leaf(rng, 2, 4, 5), leaf(rng, 4, 3, 2), leaf(rng, 3)
        assert_grad(lambda: conv_transpose1d(x, w, b, stride=2), [x, w, b])

    @pytest.mark.parametrize("kind", ["max", "avg"])
    def test_pooling(self, rng, kind):
        """Pooling with and without padding."""
        x = leaf(rng, 2, 3, 10)
        assert_grad(lambda: pool1d(x, kind, 2, 2), [x])
        assert_grad(lambda: pool1d(x, kind, 3, 1, padding=1), [x])

    @pytest.mark.parametrize("align", ["half_pixel", "grid"])
    def test_interpolation(self, rng, align):
        """Linear resampling in both alignments."""
        x = leaf(rng, 2, 2, 6)
        assert_grad(lambda: interpolate_linear1d(x, 12, align), [x])

    def test_resampling_and_shuffle(self, rng):
        """Subsampling and pixel (un)shuffle."""
        x = leaf(rng, 2, 4, 8)
        assert_grad(lambda: subsample1d(x, 2), [x])
        assert_grad(lambda: pixel_shuffle1d(x, 2), [x])
        assert_grad(lambda: pixel_unshuffle1d(x, 2), [x])

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_normalize_batch(self, rng, mode):
        """Batch normalization in both modes."""
        x, gamma, beta = leaf(rng, 3, 2, 7), leaf(rng, 2), leaf(rng, 2)
        mean, var = Tensor(np.zeros(2)), Tensor(np.ones(2))
        assert_grad(lambda: normalize_batch(x, gamma, beta, mean, var, mode=mode), [x, gamma, beta])

    def test_activations(self, rng):
        """GELU, ReLU, affine and fixed-mask dropout."""
        x = leaf(rng, 2, 3, 5)
        assert_grad(lambda: gelu(x), [x])
        assert_grad(lambda: relu(x), [x])
        assert_grad(lambda: affine(x, -1.5, 0.3), [x])
        assert_grad(lambda: dropout(x, 0.3, "train", np.random.default_rng(5)), [x])

    def test_structural(self, rng):
        """concat, length mean, softplus residual and FiLM modulation."""
        x, y = leaf(rng, 2, 3, 5), leaf(rng, 2, 2, 5)
        g, b = leaf(rng, 2, 3, 1), leaf(rng, 2, 3, 1)
        assert_grad(lambda: concat([x, y]), [x, y])
        assert_grad(lambda: mean_length(x), [x])
        assert_grad(lambda: softplus_residual(x), [x])
        assert_grad(lambda: film_modulate(x, softplus_residual(g), b), [x, g, b])

    def test_masked_mse(self, rng):
        """Masked loss gradient ignores excluded sites."""
        pred = leaf(rng, 2, 1, 6)
        target = rng.standard_normal((2, 1, 6))
        mask = np.array([1.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        assert_grad(lambda: mse_loss(pred, target, mask=mask), [pred])
        pred.grad = None
        mse_loss(pred, target, mask=mask).backward()
        assert np.all(pred.grad[..., mask == 0.0] == 0.0)


class TestAdjoints:
    """Backward passes are the adjoints of the linear forward maps."""

    @pytest.mark.parametrize(
        "op, shape",
        [
            (lambda x: conv1d(x, Tensor(np.random.default_rng(3).standard_normal((3, 2, 3))), padding=1, padding_mode="circular"), (2, 2, 9)),
            (lambda x: interpolate_linear1d(x, 14), (2, 2, 7)),
            (lambda x: interpolate_linear1d(x, 14, "grid"), (2, 2, 7)),
            (lambda x: pixel_shuffle1d(x, 2), (2, 4, 5)),
            (lambda x: subsample1d(x, 2), (2, 2, 8)),
            (lambda x: pool1d(x, "avg", 3, 2, padding=1), (2, 2, 9)),
        ],
    )
    def test_inner_product_identity(self, op, shape):
        """<f(x), y> equals <x, f^T(y)> on random instances."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = Tensor(rng.standard_normal(shape), requires_grad=True)
            out = op(x)
            y = rng.standard_normal(out.shape)
            out.backward(y)
            lhs = float(np.sum(out.data * y))
            rhs = float(np.sum(x.data * x.grad))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_conv_transpose_is_conv_adjoint(self, rng):
        """conv_transpose1d with the same weight array is the adjoint of strided conv1d."""
        w = rng.standard_normal((3, 2, 3))
        x = rng.standard_normal((1, 2, 17))
        y = rng.standard_normal((1, 3, 8))
        forward = conv1d(Tensor(x), Tensor(w), stride=2).data
        adjoint = conv_transpose1d(Tensor(y), Tensor(w), stride=2).data
        assert forward.shape == y.shape
        assert adjoint.shape == x.shape
        assert np.isclose(np.sum(forward * y), np.sum(x * adjoint), rtol=1e-12)


class TestResampling:
    """Pixel shuffle layout and grid alignment."""

    def test_pixel_shuffle_layout(self):
        """out[c, r*i + j] = in[c*r + j, i]."""
        x = np.arange(2 * 6 * 3, dtype=np.float64).reshape(1, 6, 3)
        out = pixel_shuffle1d(Tensor(x), 2).data
        assert out.shape == (1, 3, 6)
        for c in range(3):
            for i in range(3):
                for j in range(2):
                    assert out[0, c, 2 * i + j] == x[0, 2 * c + j, i]

    def test_unshuffle_inverts_shuffle(self, rng):
        """Round trip is exact."""
        x = rng.standard_normal((2, 6, 5))
        back = pixel_unshuffle1d(pixel_shuffle1d(Tensor(x), 3), 3).data
        assert np.array_equal(back, x)

    def test_grid_alignment_inverts_subsample(self, rng):
        """Grid interpolation reproduces the kept sites exactly."""
        x = rng.standard_normal((1, 1, 12))
        coarse = subsample1d(Tensor(x), 2)
        fine = interpolate_linear1d(coarse, 12, "grid").data
        assert np.array_equal(fine[..., ::2], x[..., ::2])

    def test_interpolation_preserves_constants(self):
        """Interpolation weights sum to one."""
        out = interpolate_linear1d(Tensor(np.full((1, 1, 5), 3.0)), 11).data
        assert np.allclose(out, 3.0, atol=1e-14)


class TestNormalization:
    """Batch statistics and running buffers."""

    def test_train_mode_standardizes(self, rng):
        """Per-channel output has zero mean and unit variance."""
        x = Tensor(3.0 + 2.0 * rng.standard_normal((4, 2, 10)))
        mean, var = Tensor(np.zeros(2)), Tensor(np.ones(2))
        out = normalize_batch(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), mean, var, mode="train").data
        assert np.allclose(out.mean(axis=(0, 2)), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=(0, 2)), 1.0, atol=1e-4)

    def test_running_stats_momentum(self, rng):
        """Buffers move a tenth of the way toward the batch statistics."""
        x = Tensor(rng.standard_normal((4, 1, 10)) + 5.0)
        mean, var = Tensor(np.zeros(1)), Tensor(np.ones(1))
        normalize_batch(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, mode="train")
        assert np.isclose(mean.data[0], 0.1 * x.data.mean())
        assert np.isclose(var.data[0], 0.9 + 0.1 * x.data.var())

    def test_single_element_train_batch_rejected(self):
        x = Tensor(np.ones((1, 1, 1)))
        with pytest.raises(ShapeError):
            normalize_batch(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), Tensor(np.zeros(1)), Tensor(np.ones(1)), mode="train")


class TestStructuralOps:
    """Dispatch and dropout behavior."""

    def test_dispatch_by_name(self, rng):
        """Named ops match the direct calls."""
        x = Tensor(rng.standard_normal((1, 2, 4)))
        assert np.array_equal(elementwise_structural(x, "relu").data, relu(x).data)
        assert np.array_equal(elementwise_structural(x, "affine", a=2.0, b=1.0).data, 2.0 * x.data + 1.0)
        assert elementwise_structural(x, "identity") is x
        assert elementwise_structural([x, x], "concat").shape == (1, 4, 4)
        with pytest.raises(ShapeError):
            elementwise_structural(x, "tanh")

    def test_dropout_eval_is_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        assert dropout(x, 0.5, "eval") is x

    def test_dropout_scales_survivors(self, rng):
        """Survivors are scaled by 1/(1-p)."""
        x = Tensor(np.ones((1, 1, 1000)))
        out = dropout(x, 0.25, "train", rng).data
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
        assert 0.6 < np.mean(out == 0.0) * 4 < 1.4

    def test_dropout_probability_range(self):
        with pytest.raises(ShapeError):
            dropout(Tensor(np.ones((1, 1, 2))), 1.0, "train", np.random.default_rng(0))


class TestErrors:
    """Shape, finiteness and gradient errors."""

    def test_conv_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv1d(Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((2, 4, 3))))

    def test_overflow_raises_non_finite(self):
        """Results leaving the finite range are rejected."""
        with pytest.raises(NonFiniteError):
            affine(Tensor(np.array([1e308])), 10.0, 0.0)

    def test_backward_on_untracked_tensor(self):
        with pytest.raises(MissingGradientError):
            Tensor(np.ones(3)).backward()

    def test_mask_excluding_everything(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.ones((1, 1, 3))), np.zeros((1, 1, 3)), mask=np.zeros(3))

    def test_gradient_accumulates_over_reuse(self, rng):
        """A tensor used twice receives the sum of both paths."""
        x = Tensor(rng.standard_normal((1, 1, 4)), requires_grad=True)
        inner(concat([x, x]), np.ones((1, 2, 4))).backward()
        assert np.allclose(x.grad, 2.0)


class TestParameterStore:
    """Registry, blobs and snapshots."""

    def make_store(self, rng):
        store = ParameterStore()
        store.parameter("a.weight", rng.standard_normal((2, 3)))
        store.parameter("a.bias", rng.standard_normal(2))
        store.buffer("a.running_mean", rng.standard_normal(2))
        return store

    def test_param_count_excludes_buffers(self, rng):
        assert self.make_store(rng).param_count() == 8

    def test_duplicate_names_rejected(self, rng):
        store = self.make_store(rng)
        with pytest.raises(ShapeError):
            store.parameter("a.bias", np.zeros(2))

    def test_blob_round_trip(self, rng):
        """Blob restores every parameter and buffer bit for bit."""
        source = self.make_store(rng)
        target = self.make_store(np.random.default_rng(99))
        target.load_blob(source.to_blob())
        for (name, a), (_, b) in zip(source.snapshot().items(), target.snapshot().items()):
            assert np.array_equal(a, b), name
        assert target.to_blob() == source.to_blob()

    def test_blob_from_other_registry_rejected(self, rng):
        other = ParameterStore()
        other.parameter("b.weight", np.zeros(4))
        with pytest.raises(ShapeError):
            self.make_store(rng).load_blob(other.to_blob())

    def test_snapshot_restore(self, rng):
        store = self.make_store(rng)
        saved = store.snapshot()
        store["a.weight"].data = np.zeros((2, 3))
        store.restore(saved)
        assert np.array_equal(store["a.weight"].data, saved["a.weight"])


class TestAdam:
    """Optimizer updates."""

    def test_first_step_moves_by_learning_rate(self, rng):
        """With bias correction the first update is lr * sign(g)."""
        store = ParameterStore()
        p = store.parameter("p", rng.standard_normal(5))
        before = p.data.copy()
        grads = {"p": rng.standard_normal(5)}
        adam_step(store, grads, OptimizerState(lr=1e-2, weight_decay=0.0))
        assert np.allclose(before - p.data, 1e-2 * np.sign(grads["p"]), rtol=1e-5)

    def test_descends_quadratic(self, rng):
        """Repeated steps reduce a quadratic loss."""
        store = ParameterStore()
        p = store.parameter("p", rng.standard_normal((1, 1, 6)))
        state = OptimizerState(lr=0.05, weight_decay=0.0)
        start = mse_loss(p, np.zeros((1, 1, 6))).item()
        for _ in range(200):
            store.zero_grad()
            mse_loss(p, np.zeros((1, 1, 6))).backward()
            adam_step(store, None, state)
        assert mse_loss(p, np.zeros((1, 1, 6))).item() < 0.1 * start

    def test_missing_gradient(self, rng):
        store = ParameterStore()
        store.parameter("p", np.ones(2))
        with pytest.raises(MissingGradientError):
            adam_step(store, None, OptimizerState())
