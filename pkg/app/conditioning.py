"""FiLM conditioning: metadata channels and per-level affine modulation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .errors import ShapeError
from .tensorcore import (
    ParameterStore,
    Tensor,
    as_tensor,
    channel_slice,
    conv1d,
    film_modulate,
    gelu,
    interpolate_linear1d,
    mean_length,
    softplus_residual,
)

log = structlog.get_logger(__name__)

METADATA_CHANNELS: Tuple[str, ...] = ("pos_sin", "pos_cos", "forcing", "mask")


@dataclass(frozen=True)
class MetadataVector:
    """Per-site conditioning channels, shape (M, L), in ``names`` order."""

    values: np.ndarray
    names: Tuple[str, ...]

    @property
    def length(self) -> int:
        return int(self.values.shape[1])

    def resample(self, length: int) -> "MetadataVector":
        return resample_metadata(self, length)

    def batch(self, size: int = 1) -> np.ndarray:
        return np.broadcast_to(self.values, (size,) + self.values.shape).copy()


def build_metadata(
    forcing: Union[float, np.ndarray],
    length: int,
    mask: Optional[np.ndarray] = None,
    scalars: Optional[Mapping[str, float]] = None,
) -> MetadataVector:
    if length < 4:
        raise ShapeError(f"metadata needs a grid of at least 4 sites, got {length}")
    s = np.arange(length, dtype=np.float64)
    phase = 2.0 * np.pi * s / length
    forcing_row = np.broadcast_to(np.asarray(forcing, dtype=np.float64), (length,))
    if mask is None:
        mask_row = np.ones(length)
    else:
        mask_row = np.asarray(mask, dtype=np.float64)
        if mask_row.shape != (length,) or not np.all((mask_row == 0.0) | (mask_row == 1.0)):
            raise ShapeError("metadata mask must be a 0/1 vector over the grid")
    rows = [np.sin(phase), np.cos(phase), forcing_row, mask_row]
    names = list(METADATA_CHANNELS)
    for name, value in (scalars or {}).items():
        if name in names:
            raise ShapeError(f"duplicate metadata channel {name!r}")
        rows.append(np.full(length, float(value)))
        names.append(name)
    values = np.stack(rows)
    if not np.all(np.isfinite(values)):
        raise ShapeError("metadata values must be finite")
    return MetadataVector(values=values, names=tuple(names))


def resample_metadata(mu: MetadataVector, length: int) -> MetadataVector:
    if length == mu.length:
        return mu
    values = interpolate_linear1d(Tensor(mu.values[None]), length).data[0]
    return MetadataVector(values=values, names=mu.names)


@dataclass
class FilmParams:
    level: int
    gamma_hat: Tensor
    beta: Tensor

    @property
    def channels(self) -> int:
        return int(self.gamma_hat.shape[1])


def _prefix(level: int) -> str:
    return f"film.{level}"


def film_generate(mu: Union[MetadataVector, Tensor, np.ndarray], level: int, store: ParameterStore, length: Optional[int] = None) -> FilmParams:
    """Evaluate the level's generator head: 1x1 conv, GELU, 1x1 conv, average over length.

    ``mu`` is a MetadataVector or a (B, M, L) batch; ``length`` resamples it to the
    feature length of the level first.
    """
    prefix = _prefix(level)
    if f"{prefix}.w2" not in store:
        raise ShapeError(f"no FiLM generator for level {level}", level=level)
    if isinstance(mu, MetadataVector):
        x = Tensor(mu.values[None])
    else:
        x = as_tensor(mu)
    if length is not None and x.shape[2] != length:
        x = interpolate_linear1d(x, length)
    hidden = gelu(conv1d(x, store[f"{prefix}.w1"], store[f"{prefix}.b1"]))
    raw = mean_length(conv1d(hidden, store[f"{prefix}.w2"], store[f"{prefix}.b2"]))
    channels = raw.shape[1] // 2
    gamma_hat = softplus_residual(channel_slice(raw, 0, channels))
    beta = channel_slice(raw, channels, 2 * channels)
    return FilmParams(level=level, gamma_hat=gamma_hat, beta=beta)


def film_apply(features: Tensor, params: FilmParams) -> Tensor:
    features = as_tensor(features)
    if features.ndim != 3 or features.shape[1] != params.channels:
        raise ShapeError(
            f"FiLM level {params.level} modulates {params.channels} channels, features have shape {features.shape}",
            level=params.level,
        )
    return film_modulate(features, params.gamma_hat, params.beta)


def film_invert(modulated: np.ndarray, params: FilmParams) -> np.ndarray:
    return (np.asarray(modulated) - params.beta.data) / (1.0 + params.gamma_hat.data)


class FilmGenerator1d:
    """Per-level generator head registered under ``film.{level}.*``."""

    def __init__(
        self,
        store: ParameterStore,
        level: int,
        channels: int,
        metadata_channels: int,
        hidden: int,
        rng: np.random.Generator,
        zero_init: bool = True,
    ) -> None:
        prefix = _prefix(level)
        self.level = level
        self.channels = channels
        store.parameter(f"{prefix}.w1", rng.normal(0.0, np.sqrt(2.0 / metadata_channels), (hidden, metadata_channels, 1)))
        store.parameter(f"{prefix}.b1", np.zeros(hidden))
        if zero_init:
            w2 = np.zeros((2 * channels, hidden, 1))
        else:
            w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (2 * channels, hidden, 1))
        store.parameter(f"{prefix}.w2", w2)
        store.parameter(f"{prefix}.b2", np.zeros(2 * channels))
        self.store = store

    def __call__(self, mu: Union[MetadataVector, Tensor, np.ndarray], length: Optional[int] = None) -> FilmParams:
        return film_generate(mu, self.level, self.store, length)

    def zero_head(self) -> None:
        prefix = _prefix(self.level)
        self.store[f"{prefix}.w2"].data = np.zeros_like(self.store[f"{prefix}.w2"].data)
        self.store[f"{prefix}.b2"].data = np.zeros_like(self.store[f"{prefix}.b2"].data)


def film_param_count(channels: int, metadata_channels: int, hidden: int) -> int:
    return hidden * metadata_channels + hidden + 2 * channels * hidden + 2 * channels
