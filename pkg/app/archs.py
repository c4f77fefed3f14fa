"""State-to-tendency neural operators: UNet, UNetMP, IUNet and M&M.

All four share one skeleton: an encoder of ``depth`` down levels, a bottleneck
and a mirrored decoder with skip connections, FiLM modulation after every level
and a zero-initialized 1x1 output head. Levels are numbered in forward order:
encoder ``0..depth-1``, bottleneck ``depth``, decoder ``depth+1..2*depth``.

Parameter counts follow the per-block formulas in :func:`analytic_param_count`:

    conv(cin, cout, k)      = cin*cout*k + cout          (transpose conv alike)
    norm(c)                 = 2c                         (running stats are buffers)
    double(cin, cout)       = conv(cin,cout,3) + norm(cout) + conv(cout,cout,3) + norm(cout)
    inception(cin, cout)    = 4*conv(cin,q,1) + conv(q,q,3) + conv(q,q,5) + norm(cout),  q = cout/4
    embed(M, e)             = conv(M,e,1) + conv(e,e,1)
    down(cin, cout)         = 3*conv(cin,cout,3) + conv(3cout,cout,1) + norm(cout)
    up(c, cout)             = convT(c,c,2) + conv(c,c,3) + conv(c,c,5) + conv(c,c,7)
                              + conv(3c,c,1) + conv(c,2c,1) + conv(3c,cout,1)
    film(c)                 = h*M + h + 2c*h + 2c
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .conditioning import FilmGenerator1d, MetadataVector, film_apply, film_param_count
from .errors import ConfigError, NonFiniteError, ShapeError
from .tensorcore import (
    ParameterStore,
    Tensor,
    as_tensor,
    concat,
    conv1d,
    conv_transpose1d,
    dropout,
    gelu,
    identity,
    interpolate_linear1d,
    normalize_batch,
    pixel_shuffle1d,
    pool1d,
    relu,
    subsample1d,
    upsample_linear1d,
)
from .toyclimate import NormalizationStats

log = structlog.get_logger(__name__)

Variant = Literal["unet", "unet_mp", "iunet", "mnm"]
VARIANTS: Tuple[str, ...] = ("unet", "unet_mp", "iunet", "mnm")


class ArchitectureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Variant = "unet"
    depth: int = Field(2, ge=1, le=5)
    base: int = Field(8, ge=1)
    channels: int = Field(1, ge=1)
    length: int = Field(36, ge=4)
    metadata_channels: int = Field(4, ge=1)
    film_hidden: int = Field(4, ge=1)
    meta_embed: int = Field(4, ge=1)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    subsample: int = Field(1, ge=1, le=2)
    activation: Literal["gelu", "relu"] = "gelu"
    padding_mode: Literal["zeros", "circular"] = "zeros"

    @property
    def internal_length(self) -> int:
        return self.length // self.subsample

    def level_channels(self) -> List[int]:
        return [self.base * 2**k for k in range(self.depth + 1)]


@dataclass
class RunContext:
    mode: str = "eval"
    linear: bool = False
    condition: bool = True
    rng: Optional[np.random.Generator] = None
    capture: Optional[Dict[int, np.ndarray]] = None

    @property
    def norm_mode(self) -> str:
        return "eval" if self.linear else self.mode


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def activate(x: Tensor, kind: str, ctx: RunContext) -> Tensor:
    if ctx.linear:
        return identity(x)
    return gelu(x) if kind == "gelu" else relu(x)


# ---------------------------------------------------------------------------
# layers


class Conv1d:
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        cin: int,
        cout: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        padding_mode: str = "zeros",
        zero: bool = False,
    ) -> None:
        self.name = name
        self.weight = store.parameter(f"{name}.weight", np.zeros((cout, cin, k)) if zero else _he(rng, (cout, cin, k), cin * k))
        self.bias = store.parameter(f"{name}.bias", np.zeros(cout))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.padding_mode = padding_mode

    def __call__(self, x: Tensor, ctx: Optional[RunContext] = None) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)


class ConvTranspose1d:
    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, k: int, stride: int, rng: np.random.Generator) -> None:
        self.name = name
        self.weight = store.parameter(f"{name}.weight", _he(rng, (cin, cout, k), cin * k))
        self.bias = store.parameter(f"{name}.bias", np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor, ctx: Optional[RunContext] = None) -> Tensor:
        return conv_transpose1d(x, self.weight, self.bias, self.stride)


class BatchNorm1d:
    def __init__(self, store: ParameterStore, name: str, channels: int) -> None:
        self.gamma = store.parameter(f"{name}.gamma", np.ones(channels))
        self.beta = store.parameter(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        return normalize_batch(x, self.gamma, self.beta, self.running_mean, self.running_var, mode=ctx.norm_mode)


class DoubleConv:
    """conv3 -> norm -> act, twice."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, rng: np.random.Generator, act: str, padding_mode: str) -> None:
        self.conv1 = Conv1d(store, f"{name}.conv1", cin, cout, 3, rng, padding_mode=padding_mode)
        self.norm1 = BatchNorm1d(store, f"{name}.norm1", cout)
        self.conv2 = Conv1d(store, f"{name}.conv2", cout, cout, 3, rng, padding_mode=padding_mode)
        self.norm2 = BatchNorm1d(store, f"{name}.norm2", cout)
        self.act = act

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        x = activate(self.norm1(self.conv1(x), ctx), self.act, ctx)
        return activate(self.norm2(self.conv2(x), ctx), self.act, ctx)


class InceptionBlock:
    """Four parallel branches (1x1; 1x1->k3; 1x1->k5; maxpool->1x1) concatenated, normalized, activated."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, rng: np.random.Generator, act: str, padding_mode: str) -> None:
        if cout % 4:
            raise ShapeError(f"inception block {name}: {cout} output channels not divisible by 4 branches")
        q = cout // 4
        self.branch1 = Conv1d(store, f"{name}.branch1", cin, q, 1, rng)
        self.reduce3 = Conv1d(store, f"{name}.reduce3", cin, q, 1, rng)
        self.branch3 = Conv1d(store, f"{name}.branch3", q, q, 3, rng, padding_mode=padding_mode)
        self.reduce5 = Conv1d(store, f"{name}.reduce5", cin, q, 1, rng)
        self.branch5 = Conv1d(store, f"{name}.branch5", q, q, 5, rng, padding_mode=padding_mode)
        self.pool_proj = Conv1d(store, f"{name}.pool_proj", cin, q, 1, rng)
        self.norm = BatchNorm1d(store, f"{name}.norm", cout)
        self.act = act
        self.out_channels = cout

    def branches(self, x: Tensor, ctx: RunContext) -> List[Tensor]:
        return [
            self.branch1(x),
            self.branch3(self.reduce3(x)),
            self.branch5(self.reduce5(x)),
            self.pool_proj(pool1d(x, "max", 3, 1, padding=1)),
        ]

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        return activate(self.norm(concat(self.branches(x, ctx)), ctx), self.act, ctx)


class MetaEmbed:
    """Two 1x1 convs on metadata resampled to the feature length."""

    def __init__(self, store: ParameterStore, name: str, metadata_channels: int, width: int, rng: np.random.Generator, act: str) -> None:
        self.conv1 = Conv1d(store, f"{name}.conv1", metadata_channels, width, 1, rng)
        self.conv2 = Conv1d(store, f"{name}.conv2", width, width, 1, rng)
        self.act = act

    def __call__(self, mu: Tensor, length: int, ctx: RunContext) -> Tensor:
        if mu.shape[2] != length:
            mu = interpolate_linear1d(mu, length)
        return self.conv2(activate(self.conv1(mu), self.act, ctx))


def inception_block(block: InceptionBlock, x: Tensor, ctx: RunContext, embed: Optional[MetaEmbed] = None, mu: Optional[Tensor] = None) -> Tensor:
    out = block(x, ctx)
    if embed is None:
        return out
    return concat([out, embed(mu, out.shape[2], ctx)])


class DownMultiBlock:
    """Strided conv, maxpool+conv and avgpool+conv paths fused by concat and a 1x1 conv."""

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, rng: np.random.Generator, act: str, padding_mode: str) -> None:
        self.strided = Conv1d(store, f"{name}.strided", cin, cout, 3, rng, stride=2, padding=1, padding_mode=padding_mode)
        self.max_conv = Conv1d(store, f"{name}.max_conv", cin, cout, 3, rng, padding_mode=padding_mode)
        self.avg_conv = Conv1d(store, f"{name}.avg_conv", cin, cout, 3, rng, padding_mode=padding_mode)
        self.fuse = Conv1d(store, f"{name}.fuse", 3 * cout, cout, 1, rng)
        self.norm = BatchNorm1d(store, f"{name}.norm", cout)
        self.act = act

    def paths(self, x: Tensor, ctx: RunContext) -> List[Tensor]:
        if x.shape[2] % 2:
            raise ShapeError(f"down block needs an even length, got {x.shape[2]}")
        return [
            self.strided(x),
            self.max_conv(pool1d(x, "max", 2, 2)),
            self.avg_conv(pool1d(x, "avg", 2, 2)),
        ]

    def __call__(self, x: Tensor, ctx: RunContext) -> Tensor:
        return activate(self.norm(self.fuse(concat(self.paths(x, ctx))), ctx), self.act, ctx)


class UpMultiBlock:
    """Transpose-conv, interpolate+multi-kernel conv and pixel-shuffle branches, fused 1x1.

    Purely linear: no activation or normalization inside the block.
    """

    def __init__(self, store: ParameterStore, name: str, cin: int, cout: int, rng: np.random.Generator, padding_mode: str) -> None:
        if cin % 2:
            raise ShapeError(f"up block {name}: {cin} channels do not split for pixel shuffle")
        if cout < cin:
            raise ShapeError(f"up block {name}: fusion width {cout} below input width {cin}")
        self.transpose = ConvTranspose1d(store, f"{name}.transpose", cin, cin, 2, 2, rng)
        self.interp3 = Conv1d(store, f"{name}.interp3", cin, cin, 3, rng, padding_mode=padding_mode)
        self.interp5 = Conv1d(store, f"{name}.interp5", cin, cin, 5, rng, padding_mode=padding_mode)
        self.interp7 = Conv1d(store, f"{name}.interp7", cin, cin, 7, rng, padding_mode=padding_mode)
        self.interp_fuse = Conv1d(store, f"{name}.interp_fuse", 3 * cin, cin, 1, rng)
        self.shuffle_expand = Conv1d(store, f"{name}.shuffle_expand", cin, 2 * cin, 1, rng)
        self.fuse = Conv1d(store, f"{name}.fuse", 3 * cin, cout, 1, rng)
        self.in_channels = cin
        self.out_channels = cout

    def branches(self, x: Tensor, ctx: Optional[RunContext] = None) -> List[Tensor]:
        up = upsample_linear1d(x, 2)
        interp = self.interp_fuse(concat([self.interp3(up), self.interp5(up), self.interp7(up)]))
        return [self.transpose(x), interp, pixel_shuffle1d(self.shuffle_expand(x), 2)]

    def __call__(self, x: Tensor, ctx: Optional[RunContext] = None) -> Tensor:
        return self.fuse(concat(self.branches(x, ctx)))


def down_multi_block(block: DownMultiBlock, x: Tensor, ctx: RunContext) -> Tensor:
    return block(x, ctx)


def up_multi_block(block: UpMultiBlock, x: Tensor, ctx: Optional[RunContext] = None) -> Tensor:
    return block(x, ctx)


# ---------------------------------------------------------------------------
# model graphs


class ModelGraph:
    """A built architecture: parameters, FiLM generators and the forward pass."""

    def __init__(self, config: ArchitectureConfig, seed: int, film_zero_init: bool = True) -> None:
        self.config = config
        self.seed = seed
        self.store = ParameterStore()
        self.stats_digest: Optional[str] = None
        self.epoch = 0
        self._linear = False
        self._dropout_rng = np.random.default_rng([seed, 1])
        rng = np.random.default_rng(seed)
        self._build(rng)
        self.film = [
            FilmGenerator1d(self.store, level, c, config.metadata_channels, config.film_hidden, rng, zero_init=film_zero_init)
            for level, c in enumerate(self.film_channels())
        ]
        self.head = Conv1d(self.store, "head", self.head_channels(), config.channels, 1, rng, zero=True)

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _body(self, x: Tensor, mu: Tensor, ctx: RunContext) -> Tensor:
        raise NotImplementedError

    def film_channels(self) -> List[int]:
        raise NotImplementedError

    def head_channels(self) -> int:
        return self.config.base

    def decoder_upsamplers(self) -> List[Tuple[int, object]]:
        """(decoder level index, upsampling block) pairs, deepest first."""
        raise NotImplementedError

    @property
    def levels(self) -> int:
        return 2 * self.config.depth + 1

    def param_count(self) -> int:
        return self.store.param_count()

    @contextmanager
    def linear_regime(self) -> Iterator["ModelGraph"]:
        """Identity activations and eval-mode normalization for the duration."""
        previous, self._linear = self._linear, True
        try:
            yield self
        finally:
            self._linear = previous

    def context(self, mode: str = "eval", condition: bool = True, rng: Optional[np.random.Generator] = None, capture: Optional[Dict[int, np.ndarray]] = None) -> RunContext:
        return RunContext(mode=mode, linear=self._linear, condition=condition, rng=rng if rng is not None else self._dropout_rng, capture=capture)

    def _film(self, x: Tensor, level: int, mu: Tensor, ctx: RunContext) -> Tensor:
        if ctx.condition:
            x = film_apply(x, self.film[level](mu, x.shape[2]))
        if ctx.capture is not None:
            ctx.capture[level] = x.data.copy()
        return x

    def _dropout(self, x: Tensor, ctx: RunContext) -> Tensor:
        return dropout(x, self.config.dropout, ctx.norm_mode, ctx.rng)

    def forward(
        self,
        state: Union[Tensor, np.ndarray],
        mu: Union[Tensor, np.ndarray, MetadataVector],
        mode: str = "eval",
        condition: bool = True,
        capture: Optional[Dict[int, np.ndarray]] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        cfg = self.config
        x = as_tensor(state)
        if x.ndim != 3 or x.shape[1:] != (cfg.channels, cfg.length):
            raise ShapeError(f"model expects state shaped (batch, {cfg.channels}, {cfg.length}), got {x.shape}")
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError("non-finite model input")
        m = self._metadata_batch(mu, x.shape[0])
        if cfg.subsample > 1:
            x = subsample1d(x, cfg.subsample)
            m = subsample1d(m, cfg.subsample)
        ctx = self.context(mode=mode, condition=condition, rng=rng, capture=capture)
        out = self.head(self._body(x, m, ctx))
        if cfg.subsample > 1:
            out = interpolate_linear1d(out, cfg.length, align="grid")
        return out

    __call__ = forward

    def _metadata_batch(self, mu: Union[Tensor, np.ndarray, MetadataVector], batch: int) -> Tensor:
        cfg = self.config
        values = mu.values if isinstance(mu, MetadataVector) else as_tensor(mu).data
        if values.ndim == 2:
            values = values[None]
        if values.shape[1:] != (cfg.metadata_channels, cfg.length):
            raise ShapeError(f"metadata shaped {values.shape}, model expects ({cfg.metadata_channels}, {cfg.length}) per sample")
        if values.shape[0] == 1 and batch > 1:
            values = np.broadcast_to(values, (batch,) + values.shape[1:])
        elif values.shape[0] != batch:
            raise ShapeError(f"metadata batch {values.shape[0]} != state batch {batch}")
        return Tensor(np.ascontiguousarray(values))

    def predict(self, states: np.ndarray, metadata: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode normalized tendencies for (N, C, L) normalized states."""
        out = []
        for start in range(0, states.shape[0], batch_size):
            stop = start + batch_size
            out.append(self.forward(states[start:stop], metadata[start:stop], mode="eval").data)
        return np.concatenate(out, axis=0) if out else np.zeros_like(states)


class UNet1d(ModelGraph):
    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        ch = cfg.level_channels()
        act, pad = cfg.activation, cfg.padding_mode
        self.encoders: List[DoubleConv] = []
        cin = cfg.channels
        for k in range(cfg.depth):
            self.encoders.append(DoubleConv(self.store, f"enc.{k}", cin, ch[k], rng, act, pad))
            cin = ch[k]
        self.bottleneck = DoubleConv(self.store, "bottleneck", ch[cfg.depth - 1], ch[cfg.depth], rng, act, pad)
        self.ups: Dict[int, ConvTranspose1d] = {}
        self.decoders: Dict[int, DoubleConv] = {}
        for k in reversed(range(cfg.depth)):
            self.ups[k] = ConvTranspose1d(self.store, f"dec.{k}.up", ch[k + 1], ch[k], 2, 2, rng)
            self.decoders[k] = DoubleConv(self.store, f"dec.{k}.conv", 2 * ch[k], ch[k], rng, act, pad)

    def film_channels(self) -> List[int]:
        ch = self.config.level_channels()
        d = self.config.depth
        return ch[:d] + [ch[d]] + [ch[k] for k in reversed(range(d))]

    def decoder_upsamplers(self) -> List[Tuple[int, object]]:
        d = self.config.depth
        return [(2 * d - k, self.ups[k]) for k in reversed(range(d))]

    def _body(self, x: Tensor, mu: Tensor, ctx: RunContext) -> Tensor:
        d = self.config.depth
        skips = []
        for k, encoder in enumerate(self.encoders):
            x = self._film(encoder(x, ctx), k, mu, ctx)
            skips.append(x)
            x = pool1d(x, "max", 2, 2)
        x = self._film(self._dropout(self.bottleneck(x, ctx), ctx), d, mu, ctx)
        for k in reversed(range(d)):
            x = concat([self.ups[k](x), skips[k]])
            x = self._film(self.decoders[k](x, ctx), 2 * d - k, mu, ctx)
        return x


class IUNet1d(ModelGraph):
    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        ch = cfg.level_channels()
        e, m = cfg.meta_embed, cfg.metadata_channels
        act, pad = cfg.activation, cfg.padding_mode
        self.enc_blocks: List[InceptionBlock] = []
        self.enc_embeds: List[MetaEmbed] = []
        cin = cfg.channels
        for k in range(cfg.depth):
            self.enc_blocks.append(InceptionBlock(self.store, f"enc.{k}", cin, ch[k], rng, act, pad))
            self.enc_embeds.append(MetaEmbed(self.store, f"enc.{k}.embed", m, e, rng, act))
            cin = ch[k] + e
        d = cfg.depth
        self.bottleneck = [
            InceptionBlock(self.store, "bottleneck.0", ch[d - 1] + e, ch[d], rng, act, pad),
            InceptionBlock(self.store, "bottleneck.1", ch[d] + e, ch[d], rng, act, pad),
        ]
        self.bottleneck_embeds = [
            MetaEmbed(self.store, "bottleneck.0.embed", m, e, rng, act),
            MetaEmbed(self.store, "bottleneck.1.embed", m, e, rng, act),
        ]
        self.ups: Dict[int, ConvTranspose1d] = {}
        self.dec_blocks: Dict[int, InceptionBlock] = {}
        self.dec_embeds: Dict[int, MetaEmbed] = {}
        for k in reversed(range(d)):
            self.ups[k] = ConvTranspose1d(self.store, f"dec.{k}.up", ch[k + 1] + e, ch[k], 2, 2, rng)
            self.dec_blocks[k] = InceptionBlock(self.store, f"dec.{k}", 2 * ch[k] + e, ch[k], rng, act, pad)
            self.dec_embeds[k] = MetaEmbed(self.store, f"dec.{k}.embed", m, e, rng, act)

    def film_channels(self) -> List[int]:
        ch = self.config.level_channels()
        d, e = self.config.depth, self.config.meta_embed
        return [c + e for c in ch[:d]] + [ch[d] + e] + [ch[k] + e for k in reversed(range(d))]

    def head_channels(self) -> int:
        return self.config.base + self.config.meta_embed

    def decoder_upsamplers(self) -> List[Tuple[int, object]]:
        d = self.config.depth
        return [(2 * d - k, self.ups[k]) for k in reversed(range(d))]

    def _body(self, x: Tensor, mu: Tensor, ctx: RunContext) -> Tensor:
        d = self.config.depth
        skips = []
        for k in range(d):
            x = inception_block(self.enc_blocks[k], x, ctx, self.enc_embeds[k], mu)
            x = self._film(x, k, mu, ctx)
            skips.append(x)
            x = pool1d(x, "max", 2, 2)
        for block, embed in zip(self.bottleneck, self.bottleneck_embeds):
            x = inception_block(block, x, ctx, embed, mu)
        x = self._film(self._dropout(x, ctx), d, mu, ctx)
        for k in reversed(range(d)):
            x = concat([self.ups[k](x), skips[k]])
            x = inception_block(self.dec_blocks[k], x, ctx, self.dec_embeds[k], mu)
            x = self._film(x, 2 * d - k, mu, ctx)
        return x


class MnM1d(ModelGraph):
    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        ch = cfg.level_channels()
        act, pad = cfg.activation, cfg.padding_mode
        self.encoders: List[DoubleConv] = []
        self.downs: List[DownMultiBlock] = []
        for k in range(cfg.depth):
            cin = cfg.channels + cfg.metadata_channels if k == 0 else ch[k]
            self.encoders.append(DoubleConv(self.store, f"enc.{k}", cin, ch[k], rng, act, pad))
            self.downs.append(DownMultiBlock(self.store, f"enc.{k}.down", ch[k], ch[k + 1], rng, act, pad))
        d = cfg.depth
        self.bottleneck = DoubleConv(self.store, "bottleneck", ch[d], ch[d], rng, act, pad)
        self.ups: Dict[int, UpMultiBlock] = {}
        self.decoders: Dict[int, DoubleConv] = {}
        for k in reversed(range(d)):
            self.ups[k] = UpMultiBlock(self.store, f"dec.{k}.up", ch[k + 1], ch[k + 1], rng, pad)
            self.decoders[k] = DoubleConv(self.store, f"dec.{k}.conv", ch[k + 1] + ch[k], ch[k], rng, act, pad)

    def film_channels(self) -> List[int]:
        ch = self.config.level_channels()
        d = self.config.depth
        return ch[:d] + [ch[d]] + [ch[k] for k in reversed(range(d))]

    def decoder_upsamplers(self) -> List[Tuple[int, object]]:
        d = self.config.depth
        return [(2 * d - k, self.ups[k]) for k in reversed(range(d))]

    def _body(self, x: Tensor, mu: Tensor, ctx: RunContext) -> Tensor:
        d = self.config.depth
        x = concat([x, mu])
        skips = []
        for k in range(d):
            x = self._film(self.encoders[k](x, ctx), k, mu, ctx)
            skips.append(x)
            x = down_multi_block(self.downs[k], x, ctx)
        x = self._film(self._dropout(self.bottleneck(x, ctx), ctx), d, mu, ctx)
        for k in reversed(range(d)):
            x = concat([up_multi_block(self.ups[k], x, ctx), skips[k]])
            x = self._film(self.decoders[k](x, ctx), 2 * d - k, mu, ctx)
        return x


_GRAPHS = {"unet": UNet1d, "unet_mp": UNet1d, "iunet": IUNet1d, "mnm": MnM1d}


def build_model(cfg: ArchitectureConfig, seed: int = 0, film_zero_init: bool = True) -> ModelGraph:
    if cfg.length % cfg.subsample:
        raise ShapeError(f"length {cfg.length} not divisible by subsample factor {cfg.subsample}")
    if cfg.internal_length % 2**cfg.depth:
        raise ShapeError(
            f"internal length {cfg.internal_length} not divisible by 2**depth = {2**cfg.depth}",
            length=cfg.length,
            depth=cfg.depth,
        )
    if cfg.variant == "iunet" and cfg.base % 4:
        raise ShapeError(f"iunet base width {cfg.base} not divisible by 4 branches")
    model = _GRAPHS[cfg.variant](cfg, seed, film_zero_init=film_zero_init)
    log.info("model.built", variant=cfg.variant, params=model.param_count(), depth=cfg.depth, base=cfg.base, seed=seed)
    return model


def param_count(model: ModelGraph) -> int:
    return model.param_count()


# ---------------------------------------------------------------------------
# analytic parameter counts and budget matching


def _conv(cin: int, cout: int, k: int) -> int:
    return cin * cout * k + cout


def _norm(c: int) -> int:
    return 2 * c


def _double(cin: int, cout: int) -> int:
    return _conv(cin, cout, 3) + _norm(cout) + _conv(cout, cout, 3) + _norm(cout)


def _inception(cin: int, cout: int) -> int:
    q = cout // 4
    return 4 * _conv(cin, q, 1) + _conv(q, q, 3) + _conv(q, q, 5) + _norm(cout)


def _embed(m: int, e: int) -> int:
    return _conv(m, e, 1) + _conv(e, e, 1)


def _down(cin: int, cout: int) -> int:
    return 3 * _conv(cin, cout, 3) + _conv(3 * cout, cout, 1) + _norm(cout)


def _up(c: int, cout: int) -> int:
    return (
        _conv(c, c, 2)
        + _conv(c, c, 3)
        + _conv(c, c, 5)
        + _conv(c, c, 7)
        + _conv(3 * c, c, 1)
        + _conv(c, 2 * c, 1)
        + _conv(3 * c, cout, 1)
    )


@dataclass(frozen=True)
class ParamBreakdown:
    backbone: int
    film: int

    @property
    def total(self) -> int:
        return self.backbone + self.film

    @property
    def film_fraction(self) -> float:
        return self.film / self.total


def analytic_param_count(cfg: ArchitectureConfig) -> ParamBreakdown:
    c_in, m, d, e, h = cfg.channels, cfg.metadata_channels, cfg.depth, cfg.meta_embed, cfg.film_hidden
    ch = cfg.level_channels()
    backbone = 0
    if cfg.variant in ("unet", "unet_mp"):
        cin = c_in
        for k in range(d):
            backbone += _double(cin, ch[k])
            cin = ch[k]
        backbone += _double(ch[d - 1], ch[d])
        for k in range(d):
            backbone += _conv(ch[k + 1], ch[k], 2) + _double(2 * ch[k], ch[k])
        backbone += _conv(ch[0], c_in, 1)
        film_widths = ch[:d] + [ch[d]] + ch[:d]
    elif cfg.variant == "iunet":
        cin = c_in
        for k in range(d):
            backbone += _inception(cin, ch[k]) + _embed(m, e)
            cin = ch[k] + e
        backbone += _inception(ch[d - 1] + e, ch[d]) + _inception(ch[d] + e, ch[d]) + 2 * _embed(m, e)
        for k in range(d):
            backbone += _conv(ch[k + 1] + e, ch[k], 2) + _inception(2 * ch[k] + e, ch[k]) + _embed(m, e)
        backbone += _conv(ch[0] + e, c_in, 1)
        film_widths = [c + e for c in ch[:d]] + [ch[d] + e] + [c + e for c in ch[:d]]
    else:
        for k in range(d):
            cin = c_in + m if k == 0 else ch[k]
            backbone += _double(cin, ch[k]) + _down(ch[k], ch[k + 1])
        backbone += _double(ch[d], ch[d])
        for k in range(d):
            backbone += _up(ch[k + 1], ch[k + 1]) + _double(ch[k + 1] + ch[k], ch[k])
        backbone += _conv(ch[0], c_in, 1)
        film_widths = ch[:d] + [ch[d]] + ch[:d]
    film = sum(film_param_count(c, m, h) for c in film_widths)
    return ParamBreakdown(backbone=backbone, film=film)


FILM_BUDGET_FRACTION = 0.10
BUDGET_TOLERANCE = 0.05
SMALL_TARGET = 11_500

_TOY = {
    "unet": {"base": 4, "film_hidden": 2},
    "unet_mp": {"base": 6, "film_hidden": 2},
    "iunet": {"base": 4, "meta_embed": 2, "film_hidden": 2},
    "mnm": {"base": 4, "film_hidden": 2},
}
_SMALL_UNET = {"base": 8, "film_hidden": 4}
_SMALL_MNM = {"base": 4, "film_hidden": 2}
_LARGE_MNM = {"base": 8, "film_hidden": 8}


def _candidates(variant: str) -> Iterator[Dict[str, int]]:
    hidden = range(2, 33)
    if variant == "iunet":
        for base in range(4, 97, 4):
            for e in range(2, 33):
                for h in hidden:
                    yield {"base": base, "meta_embed": e, "film_hidden": h}
    else:
        for base in range(4, 97):
            for h in hidden:
                yield {"base": base, "film_hidden": h}


def match_budget(template: ArchitectureConfig, target: int) -> ArchitectureConfig:
    """Width knobs of ``template.variant`` whose analytic count lands closest to ``target``.

    Candidates spending FILM_BUDGET_FRACTION or more on FiLM are skipped; ties go to the
    first candidate in (base, embed, hidden) order.
    """
    return _match_budget_cached(template, int(target))


@lru_cache(maxsize=64)
def _match_budget_cached(template: ArchitectureConfig, target: int) -> ArchitectureConfig:
    best: Optional[Tuple[int, ArchitectureConfig]] = None
    for knobs in _candidates(template.variant):
        cfg = template.model_copy(update=knobs)
        counts = analytic_param_count(cfg)
        if counts.film_fraction >= FILM_BUDGET_FRACTION:
            continue
        gap = abs(counts.total - target)
        if best is None or gap < best[0]:
            best = (gap, cfg)
    if best is None:
        raise ConfigError(f"no {template.variant} width meets the FiLM budget", violations=[f"model: budget {target}"])
    if best[0] > BUDGET_TOLERANCE * target:
        log.warning("archs.budget_miss", variant=template.variant, target=target, gap=best[0])
    return best[1]


def preset_config(variant: str, preset: str = "small", **fields) -> ArchitectureConfig:
    """Resolve a named preset; extra ``fields`` (length, channels, depth, dropout, ...) apply first."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}", violations=[f"model.variant: {variant}"])
    template = ArchitectureConfig(variant=variant, **fields)
    if preset == "toy":
        return template.model_copy(update=_TOY[variant])
    if preset == "small":
        if variant == "unet":
            return template.model_copy(update=_SMALL_UNET)
        anchor = template.model_copy(update={"variant": "mnm", **_SMALL_MNM})
        if variant == "mnm":
            return anchor
        return match_budget(template, analytic_param_count(anchor).total)
    if preset == "large":
        anchor = template.model_copy(update={"variant": "mnm", **_LARGE_MNM})
        if variant == "mnm":
            return anchor
        return match_budget(template, analytic_param_count(anchor).total)
    raise ConfigError(f"unknown preset {preset!r}", violations=[f"model.preset: {preset}"])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ArchitectureConfig
    seed: int
    epoch: int
    blob: bytes
    window: int
    stats: Optional[NormalizationStats] = None
    losses: List[float] = field(default_factory=list)

    @property
    def stats_digest(self) -> Optional[str]:
        return None if self.stats is None else self.stats.digest()


def make_checkpoint(model: ModelGraph, window: int, stats: Optional[NormalizationStats] = None, losses: Sequence[float] = ()) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        seed=model.seed,
        epoch=model.epoch,
        blob=model.store.to_blob(),
        window=window,
        stats=stats,
        losses=[float(v) for v in losses],
    )


def restore_model(checkpoint: Checkpoint) -> ModelGraph:
    model = build_model(checkpoint.config, checkpoint.seed)
    model.store.load_blob(checkpoint.blob)
    model.epoch = checkpoint.epoch
    model.stats_digest = checkpoint.stats_digest
    return model
