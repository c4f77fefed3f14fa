"""Dense 64-bit tensors with reverse-mode gradients.

Covers exactly the operators the 1-D neural operators need: convolutions,
pooling, resampling, pixel shuffle, batch normalization, activations, FiLM
modulation and the squared-error loss. Every op records a closure that
accumulates gradients into its parents; ``Tensor.backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import MissingGradientError, NonFiniteError, ShapeError

log = structlog.get_logger(__name__)

DTYPE = np.dtype("<f8")
ArrayLike = Union["Tensor", np.ndarray, float, Sequence[float]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        op: str = "leaf",
    ) -> None:
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data.astype(np.float64, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise MissingGradientError(f"backward() on a tensor that does not track gradients ({self.op})")
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if seed.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != tensor shape {self.data.shape}")
        self.grad = seed.copy() if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _result(op: str, data: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values", op=op)
    tracked = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=tracked, parents=parents if tracked else (), backward=backward if tracked else None, op=op)


def _require_3d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.ndim != 3:
            raise ShapeError(f"{op} expects (batch, channels, length), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolutions


def _pad(x: np.ndarray, padding: int, mode: str, fill: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (padding, padding)), mode="wrap")
    return np.pad(x, ((0, 0), (0, 0), (padding, padding)), mode="constant", constant_values=fill)


def _unpad(gxp: np.ndarray, padding: int, mode: str, length: int) -> np.ndarray:
    if padding == 0:
        return gxp
    if mode == "circular":
        idx = (np.arange(gxp.shape[2]) - padding) % length
        gx = np.zeros(gxp.shape[:2] + (length,))
        np.add.at(gx, (slice(None), slice(None), idx), gxp)
        return gx
    return gxp[:, :, padding : padding + length].copy()


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, L) with ``weight`` (Cout, Cin, K)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_3d("conv1d", x, weight)
    if stride < 1:
        raise ShapeError(f"conv1d stride must be positive, got {stride}")
    batch, cin, length = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv1d weight expects {wcin} input channels, input has {cin}")
    if bias is not None and as_tensor(bias).shape != (cout,):
        raise ShapeError(f"conv1d bias shape {as_tensor(bias).shape} != ({cout},)")
    xp = _pad(x.data, padding, padding_mode)
    lout = (xp.shape[2] - k) // stride + 1
    if lout < 1:
        raise ShapeError(f"conv1d kernel {k} longer than padded input {xp.shape[2]}")
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents = parents + (bias,)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, cols, axes=([0, 2], [0, 2])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            span = stride * (lout - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += gcols[..., j]
            _accumulate(x, _unpad(gxp, padding, padding_mode, length))

    return _result("conv1d", out, parents, backward)


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` with weight laid out (Cin, Cout, K); output length (L-1)*stride + K."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_3d("conv_transpose1d", x, weight)
    if stride < 1:
        raise ShapeError(f"conv_transpose1d stride must be positive, got {stride}")
    batch, cin, length = x.shape
    wcin, cout, k = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose1d weight expects {wcin} input channels, input has {cin}")
    lout = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    out = np.zeros((batch, cout, lout))
    for j in range(k):
        out[:, :, j : j + span : stride] += np.tensordot(x.data, weight.data[:, :, j], axes=([1], [0])).transpose(0, 2, 1)
    parents: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv_transpose1d bias shape {bias.shape} != ({cout},)")
        out += bias.data[None, :, None]
        parents = parents + (bias,)

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for j in range(k):
            gslice = g[:, :, j : j + span : stride]
            if gx is not None:
                gx += np.tensordot(gslice, weight.data[:, :, j], axes=([1], [1])).transpose(0, 2, 1)
            if gw is not None:
                gw[:, :, j] = np.tensordot(x.data, gslice, axes=([0, 2], [0, 2]))
        if gx is not None:
            _accumulate(x, gx)
        if gw is not None:
            _accumulate(weight, gw)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))

    return _result("conv_transpose1d", out, parents, backward)


# ---------------------------------------------------------------------------
# pooling and resampling


def pool1d(x: Tensor, kind: str, window: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling; max ties route to the first index, avg counts padded zeros."""
    x = as_tensor(x)
    _require_3d("pool1d", x)
    if kind not in ("max", "avg"):
        raise ShapeError(f"unknown pooling kind {kind!r}")
    if window < 1 or stride < 1:
        raise ShapeError(f"pool1d window and stride must be positive, got {window}, {stride}")
    if padding >= window:
        raise ShapeError(f"pool1d padding {padding} must be smaller than window {window}")
    batch, channels, length = x.shape
    if length + 2 * padding < window:
        raise ShapeError(f"pool1d window {window} larger than length {length}")
    xp = _pad(x.data, padding, "zeros", fill=-np.inf if kind == "max" else 0.0)
    windows = sliding_window_view(xp, window, axis=2)[:, :, ::stride, :]
    lout = windows.shape[2]
    span = stride * (lout - 1) + 1

    if kind == "max":
        arg = np.argmax(windows, axis=-1)
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        pos = arg + (np.arange(lout) * stride)[None, None, :]

        def backward(g: np.ndarray) -> None:
            gxp = np.zeros(xp.shape)
            b_idx, c_idx = np.meshgrid(np.arange(batch), np.arange(channels), indexing="ij")
            np.add.at(gxp, (b_idx[..., None], c_idx[..., None], pos), g)
            _accumulate(x, _unpad(gxp, padding, "zeros", length))

    else:
        out = windows.mean(axis=-1)

        def backward(g: np.ndarray) -> None:
            gxp = np.zeros(xp.shape)
            share = g / window
            for j in range(window):
                gxp[:, :, j : j + span : stride] += share
            _accumulate(x, _unpad(gxp, padding, "zeros", length))

    return _result(f"{kind}_pool1d", np.ascontiguousarray(out), (x,), backward)


@lru_cache(maxsize=256)
def _interp_matrix(length: int, size: int, align: str) -> np.ndarray:
    i = np.arange(size, dtype=np.float64)
    if align == "half_pixel":
        src = (i + 0.5) * length / size - 0.5
    elif align == "grid":
        src = i * length / size
    else:
        raise ShapeError(f"unknown interpolation alignment {align!r}")
    src = np.clip(src, 0.0, length - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, length - 1)
    w = src - lo
    m = np.zeros((size, length))
    np.add.at(m, (np.arange(size), lo), 1.0 - w)
    np.add.at(m, (np.arange(size), hi), w)
    m.setflags(write=False)
    return m


def interpolate_linear1d(x: Tensor, size: int, align: str = "half_pixel") -> Tensor:
    """Linear resampling along length.

    ``half_pixel`` maps output i to source (i+0.5)*L/size - 0.5; ``grid`` maps it
    to i*L/size (the inverse of taking every other sample). Both clamp to [0, L-1].
    """
    x = as_tensor(x)
    _require_3d("interpolate_linear1d", x)
    if size < 1:
        raise ShapeError(f"interpolation size must be positive, got {size}")
    m = _interp_matrix(x.shape[2], size, align)
    out = x.data @ m.T

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ m)

    return _result("interpolate_linear1d", out, (x,), backward)


def upsample_linear1d(x: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise ShapeError(f"upsample factor must be >= 2, got {factor}")
    x = as_tensor(x)
    _require_3d("upsample_linear1d", x)
    return interpolate_linear1d(x, factor * x.shape[2], align="half_pixel")


def subsample1d(x: Tensor, factor: int) -> Tensor:
    """Keep every ``factor``-th site starting at site 0."""
    x = as_tensor(x)
    _require_3d("subsample1d", x)
    if factor < 1 or x.shape[2] % factor:
        raise ShapeError(f"length {x.shape[2]} not divisible by subsample factor {factor}")
    out = x.data[:, :, ::factor].copy()

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[:, :, ::factor] = g
        _accumulate(x, gx)

    return _result("subsample1d", out, (x,), backward)


def pixel_shuffle1d(x: Tensor, r: int) -> Tensor:
    """(C, L) -> (C/r, r*L) with out[c, r*i + j] = in[c*r + j, i]."""
    x = as_tensor(x)
    _require_3d("pixel_shuffle1d", x)
    batch, channels, length = x.shape
    if r < 1 or channels % r:
        raise ShapeError(f"pixel_shuffle1d: {channels} channels not divisible by {r}")
    out = x.data.reshape(batch, channels // r, r, length).transpose(0, 1, 3, 2).reshape(batch, channels // r, length * r)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(batch, channels // r, length, r).transpose(0, 1, 3, 2).reshape(batch, channels, length))

    return _result("pixel_shuffle1d", np.ascontiguousarray(out), (x,), backward)


def pixel_unshuffle1d(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle1d`."""
    x = as_tensor(x)
    _require_3d("pixel_unshuffle1d", x)
    batch, channels, length = x.shape
    if r < 1 or length % r:
        raise ShapeError(f"pixel_unshuffle1d: length {length} not divisible by {r}")
    out = x.data.reshape(batch, channels, length // r, r).transpose(0, 1, 3, 2).reshape(batch, channels * r, length // r)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(batch, channels, r, length // r).transpose(0, 1, 3, 2).reshape(batch, channels, length))

    return _result("pixel_unshuffle1d", np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def normalize_batch(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over batch x length.

    Train mode normalizes with the batch statistics and folds them into the
    running buffers (biased variance); eval mode uses the buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_3d("normalize_batch", x)
    batch, channels, length = x.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"normalize_batch affine parameters must have shape ({channels},)")
    g_, b_ = gamma.data[None, :, None], beta.data[None, :, None]

    if mode == "train":
        n = batch * length
        if n <= 1:
            raise ShapeError("normalize_batch in train mode needs more than one element per channel")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mean
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var

        def backward(g: np.ndarray) -> None:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2)))
            _accumulate(beta, g.sum(axis=(0, 2)))
            if x.requires_grad:
                gxhat = g * g_
                s1 = gxhat.sum(axis=(0, 2), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
                _accumulate(x, inv[None, :, None] / n * (n * gxhat - s1 - xhat * s2))

    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data[None, :, None]) * inv[None, :, None]

        def backward(g: np.ndarray) -> None:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2)))
            _accumulate(beta, g.sum(axis=(0, 2)))
            _accumulate(x, g * g_ * inv[None, :, None])

    else:
        raise ShapeError(f"unknown normalization mode {mode!r}")

    return _result("normalize_batch", g_ * xhat + b_, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * active)

    return _result("relu", np.where(active, x.data, 0.0), (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))

    def backward(g: np.ndarray) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _result("gelu", x.data * cdf, (x,), backward)


def identity(x: Tensor) -> Tensor:
    return as_tensor(x)


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); a no-op outside train mode."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if mode != "train" or p == 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result("dropout", x.data * mask, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    items = [as_tensor(t) for t in tensors]
    if not items:
        raise ShapeError("concat of an empty list")
    _require_3d("concat", *items)
    ref = items[0].shape
    for t in items[1:]:
        if t.shape[:axis] + t.shape[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeError(f"concat shape mismatch: {t.shape} vs {ref} outside axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])
    out = np.concatenate([t.data for t in items], axis=axis)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                _accumulate(t, g[tuple(index)])

    return _result("concat", out, tuple(items), backward)


def affine(x: Tensor, a: float, b: float) -> Tensor:
    x = as_tensor(x)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, a * g)

    return _result("affine", a * x.data + b, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(y, g)

    return _result("add", x.data + y.data, (x, y), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _require_3d("channel_slice", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] outside {x.shape[1]} channels")

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[:, start:stop, :] = g
        _accumulate(x, gx)

    return _result("channel_slice", x.data[:, start:stop, :].copy(), (x,), backward)


def mean_length(x: Tensor) -> Tensor:
    """Global average over length, keeping a singleton length axis."""
    x = as_tensor(x)
    _require_3d("mean_length", x)
    length = x.shape[2]

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g / length, x.shape).copy())

    return _result("mean_length", x.data.mean(axis=2, keepdims=True), (x,), backward)


def softplus_residual(h: Tensor) -> Tensor:
    """softplus(h) - softplus(0): zero at h=0 and strictly greater than -1."""
    h = as_tensor(h)
    out = np.logaddexp(0.0, h.data) - np.logaddexp(0.0, np.zeros_like(h.data))

    def backward(g: np.ndarray) -> None:
        _accumulate(h, g * special.expit(h.data))

    return _result("softplus_residual", out, (h,), backward)


def film_modulate(x: Tensor, gamma_hat: Tensor, beta: Tensor) -> Tensor:
    """(1 + gamma_hat) * x + beta with (B, C, 1) parameters broadcast over length."""
    x, gamma_hat, beta = as_tensor(x), as_tensor(gamma_hat), as_tensor(beta)
    _require_3d("film_modulate", x, gamma_hat, beta)
    expected = (x.shape[0], x.shape[1], 1)
    for t in (gamma_hat, beta):
        if t.shape != expected and t.shape != (1,) + expected[1:]:
            raise ShapeError(f"FiLM parameters shaped {t.shape}, features need {expected}")
    scale = 1.0 + gamma_hat.data

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * scale)
        _accumulate(gamma_hat, _reduce_to(g * x.data, gamma_hat.shape))
        _accumulate(beta, _reduce_to(g, beta.shape))

    return _result("film_modulate", scale * x.data + beta.data, (x, gamma_hat, beta), backward)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def inner(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <x, weights>; used to project non-scalar outputs for gradient checks."""
    x = as_tensor(x)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"inner shape mismatch: {x.shape} vs {w.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * w)

    return _result("inner", np.array(np.sum(x.data * w)), (x,), backward)


_STRUCTURAL: Dict[str, Callable[..., Tensor]] = {
    "relu": relu,
    "gelu": gelu,
    "dropout": dropout,
    "affine": affine,
    "identity": identity,
}


def elementwise_structural(x: Union[Tensor, Sequence[Tensor]], op: str, **params) -> Tensor:
    """Dispatch by name: relu | gelu | dropout(p, mode, rng) | concat | affine(a, b) | identity."""
    if op == "concat":
        return concat(x, axis=params.get("axis", 1))
    try:
        fn = _STRUCTURAL[op]
    except KeyError:
        raise ShapeError(f"unknown structural op {op!r}") from None
    return fn(x, **params)


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred: Tensor, target: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error; ``mask`` (broadcastable 0/1 weights) drops excluded entries."""
    pred = as_tensor(pred)
    target_t = as_tensor(target)
    if pred.shape != target_t.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target_t.shape}")
    diff = pred.data - target_t.data
    if mask is None:
        weight = None
        count = float(diff.size)
    else:
        weight = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
        count = float(weight.sum())
        if count == 0.0:
            raise ShapeError("mse_loss mask excludes every element")
        diff = diff * weight
    value = np.array(np.sum(diff * diff) / count)

    def backward(g: np.ndarray) -> None:
        grad = 2.0 * diff / count * g
        _accumulate(pred, grad)
        _accumulate(target_t, -grad)

    return _result("mse_loss", value, (pred, target_t), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Ordered registry of trainable parameters plus non-trained buffers."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, Tensor] = {}

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        self._check_new(name)
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> Tensor:
        self._check_new(name)
        t = Tensor(np.array(value, dtype=np.float64), op=name)
        self._buffers[name] = t
        return t

    def _check_new(self, name: str) -> None:
        if name in self._params or name in self._buffers:
            raise ShapeError(f"duplicate parameter name {name!r}")

    def __getitem__(self, name: str) -> Tensor:
        if name in self._params:
            return self._params[name]
        return self._buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params or name in self._buffers

    def __len__(self) -> int:
        return len(self._params)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def named_buffers(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._buffers.items())

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def _entries(self) -> List[Tuple[str, str, Tensor]]:
        return [(n, "param", t) for n, t in self._params.items()] + [(n, "buffer", t) for n, t in self._buffers.items()]

    def manifest(self) -> List[Dict[str, object]]:
        out, offset = [], 0
        for name, kind, t in self._entries():
            out.append({"name": name, "kind": kind, "shape": list(t.shape), "offset": offset})
            offset += t.data.size
        return out

    def to_blob(self) -> bytes:
        """Text manifest line, newline, then little-endian float64 values in registry order."""
        header = json.dumps(self.manifest(), separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(t.data, dtype=DTYPE).tobytes() for _, _, t in self._entries())
        return header + b"\n" + payload

    def load_blob(self, blob: bytes) -> None:
        header, _, payload = blob.partition(b"\n")
        manifest = json.loads(header.decode("utf-8"))
        if [(m["name"], m["kind"], tuple(m["shape"])) for m in manifest] != [(n, k, t.shape) for n, k, t in self._entries()]:
            raise ShapeError("parameter blob manifest does not match this registry")
        values = np.frombuffer(payload, dtype=DTYPE)
        expected = sum(t.data.size for _, _, t in self._entries())
        if values.size != expected:
            raise ShapeError(f"parameter blob holds {values.size} values, registry needs {expected}")
        for entry, (_, _, t) in zip(manifest, self._entries()):
            start = entry["offset"]
            t.data = values[start : start + t.data.size].reshape(t.shape).astype(np.float64)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, _, t in self._entries()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for name, _, t in self._entries():
            t.data = np.array(snapshot[name], dtype=np.float64)


@dataclass
class OptimizerState:
    lr: float = 5e-4
    weight_decay: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, grads: Optional[Mapping[str, np.ndarray]], state: OptimizerState) -> ParameterStore:
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    named = list(params.named_parameters())
    resolved = []
    for name, p in named:
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise MissingGradientError(f"no gradient for parameter {name!r}", parameter=name)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} shaped {g.shape}, parameter {p.shape}")
        resolved.append((name, p, g))
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p, g in resolved:
        m = state.first.get(name)
        v = state.second.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.first[name], state.second[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = p.data - state.lr * update
    return params


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradientCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-6,
    samples: int = 32,
    step: float = 1e-5,
    seed: int = 0,
) -> GradientCheckReport:
    """Compare reverse-mode gradients with central differences on sampled coordinates.

    ``fn`` rebuilds the graph from ``inputs``; non-scalar outputs are projected on a
    fixed random direction first.
    """
    rng = np.random.default_rng(seed)
    projection: Dict[str, np.ndarray] = {}

    def scalar() -> Tensor:
        out = fn()
        if out.data.size == 1:
            return out
        if "w" not in projection:
            projection["w"] = rng.standard_normal(out.shape)
        return inner(out, projection["w"])

    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    value = scalar()
    value.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
    picks = rng.choice(len(coords), size=min(samples, len(coords)), replace=False)
    scale = max(max((float(np.max(np.abs(a))) for a in analytic if a.size), default=0.0), 1e-12)
    worst = 0.0
    for pick in sorted(int(p) for p in picks):
        i, j = coords[pick]
        flat = inputs[i].data.reshape(-1)
        original = flat[j]
        flat[j] = original + step
        plus = scalar().item()
        flat[j] = original - step
        minus = scalar().item()
        flat[j] = original
        numeric = (plus - minus) / (2.0 * step)
        exact = analytic[i].reshape(-1)[j]
        denom = max(abs(exact), abs(numeric), 1e-3 * scale)
        worst = max(worst, abs(exact - numeric) / denom)
    report = GradientCheckReport(max_rel_error=worst, checked=len(picks), tolerance=tolerance)
    log.debug("gradient_check.done", max_rel_error=worst, checked=report.checked, passed=report.passed)
    return report
