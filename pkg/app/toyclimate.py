"""Two-scale ring system as the reference, its one-scale truncation as the biased model.

The reference couples K slow sites X to J fast sites Y per slow site. The biased
model drops the fast coupling, which is the systematic error the corrector
learns. Nudged runs relax the biased model toward the reference archive and
produce (instantaneous state, window-mean nudging tendency) training pairs.

Steps are indexed globally from the end of spin-up: step ``s`` sits at model
time ``s * dt``; window ``w`` starts at step ``w * window``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .conditioning import MetadataVector, build_metadata
from .errors import (
    BlowUpError,
    ConfigError,
    DegenerateChannelError,
    HorizonError,
    ShapeError,
    SplitOverlapError,
    StatsMismatchError,
)
from .fields import IntTuple

log = structlog.get_logger(__name__)

CHANNEL_NAMES: Tuple[str, ...] = ("x",)


class SystemConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    sites: int = Field(36, ge=4)
    fast_per_site: int = Field(10, ge=1)
    forcing: float = 10.0
    forcing_amplitude: float = 0.0
    forcing_period: float = Field(5.0, gt=0.0)
    coupling_h: float = 1.0
    coupling_c: float = 10.0
    coupling_b: float = Field(10.0, gt=0.0)
    dt: float = Field(0.005, gt=0.0)
    window: int = Field(6, ge=1)
    tau: Optional[float] = Field(None, gt=0.0)
    reference_stride: Optional[int] = Field(None, ge=1)
    spinup_steps: int = Field(2000, ge=0)
    transient_steps: int = Field(1000, ge=0)
    mask_sites: IntTuple = ()

    @model_validator(mode="after")
    def _check(self) -> "SystemConfig":
        if self.spinup_steps < self.transient_steps:
            raise ValueError(f"spinup_steps {self.spinup_steps} shorter than transient_steps {self.transient_steps}")
        if self.reference_stride is not None and self.window % self.reference_stride != 0:
            raise ValueError(f"reference_stride {self.reference_stride} does not divide window {self.window}")
        bad = [s for s in self.mask_sites if not 0 <= s < self.sites]
        if bad:
            raise ValueError(f"mask_sites {bad} outside 0..{self.sites - 1}")
        return self

    @property
    def relaxation(self) -> float:
        """Nudging timescale; two windows unless set."""
        return self.tau if self.tau is not None else 2.0 * self.window * self.dt

    @property
    def stride(self) -> int:
        """Reference archive spacing in steps; every step unless set."""
        return self.reference_stride if self.reference_stride is not None else 1

    def site_mask(self) -> np.ndarray:
        mask = np.ones(self.sites)
        mask[list(self.mask_sites)] = 0.0
        return mask


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(3, ge=2)
    windows_per_epoch: int = Field(200, ge=1)
    gap_windows: int = Field(40, ge=0)
    train_epochs: IntTuple = (0, 1)
    test_epochs: IntTuple = (2,)
    subsample: int = Field(1, ge=1, le=2)


# ---------------------------------------------------------------------------
# dynamics


def forcing_at(cfg: SystemConfig, t: float) -> float:
    if cfg.forcing_amplitude == 0.0:
        return cfg.forcing
    return cfg.forcing + cfg.forcing_amplitude * float(np.sin(2.0 * np.pi * t / cfg.forcing_period))


def _slow_tendency(x: np.ndarray, forcing: float) -> np.ndarray:
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + forcing


def _two_scale_tendency(state: np.ndarray, cfg: SystemConfig, forcing: float) -> np.ndarray:
    k = cfg.sites
    x, y = state[:k], state[k:]
    hcb = cfg.coupling_h * cfg.coupling_c / cfg.coupling_b
    coupling = hcb * y.reshape(k, cfg.fast_per_site).sum(axis=1)
    dx = _slow_tendency(x, forcing) - coupling
    cb = cfg.coupling_c * cfg.coupling_b
    dy = -cb * np.roll(y, -1) * (np.roll(y, -2) - np.roll(y, 1)) - cfg.coupling_c * y + hcb * np.repeat(x, cfg.fast_per_site)
    return np.concatenate([dx, dy])


def _rk4(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, dt: float) -> np.ndarray:
    hh, h6 = 0.5 * dt, dt / 6.0
    k1 = f(x)
    k2 = f(x + hh * k1)
    k3 = f(x + hh * k2)
    k4 = f(x + dt * k3)
    return x + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def check_finite(state: np.ndarray, step: int, provenance: str) -> None:
    if not np.all(np.isfinite(state)):
        log.error("toyclimate.blow_up", step=step, provenance=provenance)
        raise BlowUpError(f"{provenance} run left the finite range at step {step}", step=step, provenance=provenance)


def step_truth(state: np.ndarray, cfg: SystemConfig, t: float = 0.0) -> np.ndarray:
    """One RK4 step of the two-scale system; ``state`` is X (K) followed by Y (K*J)."""
    if state.shape != (cfg.sites * (1 + cfg.fast_per_site),):
        raise ShapeError(f"two-scale state must have {cfg.sites * (1 + cfg.fast_per_site)} entries, got {state.shape}")
    forcing = forcing_at(cfg, t)
    return _rk4(lambda s: _two_scale_tendency(s, cfg, forcing), state, cfg.dt)


def step_free(x: np.ndarray, cfg: SystemConfig, t: float = 0.0, extra: Optional[np.ndarray] = None) -> np.ndarray:
    """One RK4 step of the one-scale model; ``extra`` is a tendency held fixed over the stages."""
    if x.shape != (cfg.sites,):
        raise ShapeError(f"slow state must have {cfg.sites} entries, got {x.shape}")
    forcing = forcing_at(cfg, t)
    if extra is None:
        return _rk4(lambda s: _slow_tendency(s, forcing), x, cfg.dt)
    return _rk4(lambda s: _slow_tendency(s, forcing) + extra, x, cfg.dt)


def nudging_tendency(x_model: np.ndarray, x_reference: np.ndarray, tau: float) -> np.ndarray:
    """Relaxation toward the reference, (X_p - X_m) / tau."""
    if tau <= 0.0:
        raise ConfigError(f"nudging timescale must be positive, got {tau}", violations=[f"system.tau: {tau}"])
    if x_model.shape != x_reference.shape:
        raise ShapeError(f"nudging shapes differ: {x_model.shape} vs {x_reference.shape}")
    return (x_reference - x_model) / tau


def initial_state(cfg: SystemConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = cfg.forcing + rng.standard_normal(cfg.sites)
    y = 0.1 * rng.standard_normal(cfg.sites * cfg.fast_per_site)
    return np.concatenate([x, y])


def spun_up_state(cfg: SystemConfig, seed: int) -> np.ndarray:
    state = initial_state(cfg, seed)
    for i in range(cfg.spinup_steps):
        state = step_truth(state, cfg, t=(i - cfg.spinup_steps) * cfg.dt)
    check_finite(state, cfg.spinup_steps, "spinup")
    return state


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    """Slow-state snapshots at window boundaries, shape (windows + 1, C, L)."""

    provenance: str
    snapshots: np.ndarray
    window: int
    dt: float
    seed: int
    start_window: int = 0
    config_digest: str = ""
    cadence: str = ""
    scaling: str = ""
    corrector: str = ""
    channel_names: Tuple[str, ...] = CHANNEL_NAMES
    increments: Optional[np.ndarray] = None
    corrections: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return int(self.snapshots.shape[0] - 1)

    def times(self) -> np.ndarray:
        return (self.start_window + np.arange(self.snapshots.shape[0])) * self.window * self.dt


@dataclass
class TruthRun:
    """Reference archive at ``stride`` steps plus the window-boundary record."""

    reference: np.ndarray
    stride: int
    record: RunRecord
    final_state: np.ndarray

    @property
    def last_step(self) -> int:
        return (self.reference.shape[0] - 1) * self.stride

    def reference_at(self, step: int) -> np.ndarray:
        """Reference linearly interpolated in time to ``step``."""
        if step < 0 or step > self.last_step:
            raise HorizonError(f"reference archive covers steps 0..{self.last_step}, step {step} requested", step=step)
        i, rem = divmod(step, self.stride)
        if rem == 0:
            return self.reference[i]
        w = rem / self.stride
        return (1.0 - w) * self.reference[i] + w * self.reference[i + 1]

    def slow_at_window(self, window: int) -> np.ndarray:
        return self.record.snapshots[window, 0].copy()


def run_truth(cfg: SystemConfig, windows: int, seed: int) -> TruthRun:
    """Spin up the two-scale system, then archive the slow state every ``stride`` steps."""
    state = spun_up_state(cfg, seed)
    k, stride, w = cfg.sites, cfg.stride, cfg.window
    total = windows * w
    reference = [state[:k].copy()]
    boundaries = [state[:k].copy()]
    for s in range(total):
        state = step_truth(state, cfg, t=s * cfg.dt)
        check_finite(state, s + 1, "truth")
        if (s + 1) % stride == 0:
            reference.append(state[:k].copy())
        if (s + 1) % w == 0:
            boundaries.append(state[:k].copy())
    record = RunRecord(provenance="truth", snapshots=np.stack(boundaries)[:, None, :], window=w, dt=cfg.dt, seed=seed)
    log.info("toyclimate.truth", windows=windows, stride=stride, seed=seed)
    return TruthRun(reference=np.stack(reference), stride=stride, record=record, final_state=state)


@dataclass
class NudgingPair:
    """Physical-unit sample: state at the window start and the window-mean nudging tendency."""

    t0: float
    state: np.ndarray
    tendency: np.ndarray
    metadata: MetadataVector
    epoch: int = 0


def metadata_at(cfg: SystemConfig, t: float) -> MetadataVector:
    return build_metadata(forcing_at(cfg, t), cfg.sites, mask=cfg.site_mask())


def run_nudged(
    cfg: SystemConfig,
    truth: TruthRun,
    windows: int,
    start_window: int = 0,
    initial: Optional[np.ndarray] = None,
    epoch: int = 0,
    trace: Optional[List[np.ndarray]] = None,
) -> Tuple[RunRecord, List[NudgingPair]]:
    """Integrate the biased model with the nudging term at every step.

    Each window archives the instantaneous state at its start and the mean of its
    per-step tendencies. Masked sites get a zero tendency. ``trace`` collects the
    per-step tendencies when given.
    """
    w = cfg.window
    last_needed = (start_window + windows) * w - 1
    if last_needed > truth.last_step:
        raise HorizonError(
            f"nudged run needs reference up to step {last_needed}, archive ends at {truth.last_step}",
            requested=last_needed,
            available=truth.last_step,
        )
    tau = cfg.relaxation
    mask = cfg.site_mask()
    x = truth.slow_at_window(start_window) if initial is None else np.array(initial, dtype=np.float64)
    snapshots = [x.copy()]
    means = []
    pairs: List[NudgingPair] = []
    for j in range(windows):
        s0 = (start_window + j) * w
        t0 = s0 * cfg.dt
        state0 = x.copy()
        per_step = []
        for i in range(w):
            s = s0 + i
            tendency = nudging_tendency(x, truth.reference_at(s), tau) * mask
            x = step_free(x, cfg, t=s * cfg.dt, extra=tendency)
            check_finite(x, s + 1, "nudged")
            per_step.append(tendency)
        stack = np.stack(per_step)
        if trace is not None:
            trace.extend(per_step)
        window_mean = stack.mean(axis=0)
        means.append(window_mean)
        snapshots.append(x.copy())
        pairs.append(NudgingPair(t0=t0, state=state0[None, :], tendency=window_mean[None, :], metadata=metadata_at(cfg, t0), epoch=epoch))
    record = RunRecord(
        provenance="nudged",
        snapshots=np.stack(snapshots)[:, None, :],
        window=w,
        dt=cfg.dt,
        seed=truth.record.seed,
        start_window=start_window,
        corrections=np.stack(means)[:, None, :] if means else None,
    )
    return record, pairs


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizationStats:
    """Per-channel ranges; tendencies use a symmetric range so zero maps to zero."""

    channel_names: Tuple[str, ...]
    state_min: np.ndarray
    state_max: np.ndarray
    tend_min: np.ndarray
    tend_max: np.ndarray

    def to_dict(self) -> Dict[str, object]:
        return {
            "channel_names": list(self.channel_names),
            "state_min": self.state_min.tolist(),
            "state_max": self.state_max.tolist(),
            "tend_min": self.tend_min.tolist(),
            "tend_max": self.tend_max.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "NormalizationStats":
        return cls(
            channel_names=tuple(data["channel_names"]),
            state_min=np.asarray(data["state_min"], dtype=np.float64),
            state_max=np.asarray(data["state_max"], dtype=np.float64),
            tend_min=np.asarray(data["tend_min"], dtype=np.float64),
            tend_max=np.asarray(data["tend_max"], dtype=np.float64),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    def bounds(self, kind: str, channels: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
        if kind == "state":
            lo, hi = self.state_min, self.state_max
        elif kind == "tendency":
            lo, hi = self.tend_min, self.tend_max
        else:
            raise ShapeError(f"unknown normalization kind {kind!r}")
        if channels is not None:
            missing = [c for c in channels if c not in self.channel_names]
            if missing:
                raise StatsMismatchError(f"no statistics for channels {missing}", channels=list(missing))
            idx = [self.channel_names.index(c) for c in channels]
            lo, hi = lo[idx], hi[idx]
        return lo[:, None], hi[:, None]


def compute_stats(states: np.ndarray, tendencies: np.ndarray, channel_names: Sequence[str] = CHANNEL_NAMES) -> NormalizationStats:
    """Ranges over samples and sites of (N, C, L) arrays."""
    s_lo = states.min(axis=(0, 2))
    s_hi = states.max(axis=(0, 2))
    t_abs = np.abs(tendencies).max(axis=(0, 2))
    for c, name in enumerate(channel_names):
        if not s_hi[c] > s_lo[c]:
            raise DegenerateChannelError(f"degenerate channel {name!r}: state max equals min", channel=name)
        if not t_abs[c] > 0.0:
            raise DegenerateChannelError(f"degenerate channel {name!r}: tendency is identically zero", channel=name)
    return NormalizationStats(tuple(channel_names), s_lo, s_hi, -t_abs, t_abs.copy())


def normalize(x: np.ndarray, stats: NormalizationStats, kind: str = "state", channels: Optional[Sequence[str]] = None) -> np.ndarray:
    lo, hi = stats.bounds(kind, channels)
    return 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0


def denormalize(y: np.ndarray, stats: NormalizationStats, kind: str = "state", channels: Optional[Sequence[str]] = None) -> np.ndarray:
    lo, hi = stats.bounds(kind, channels)
    return (np.asarray(y) + 1.0) * (hi - lo) / 2.0 + lo


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSplit:
    states: np.ndarray
    tendencies: np.ndarray
    metadata: np.ndarray
    epochs: np.ndarray
    t0: np.ndarray

    def __len__(self) -> int:
        return int(self.states.shape[0])


@dataclass
class Dataset:
    train: DatasetSplit
    test: DatasetSplit
    stats: NormalizationStats
    mask: np.ndarray
    subsample: int = 1
    window: int = 6
    dt: float = 0.005
    channel_names: Tuple[str, ...] = CHANNEL_NAMES
    metadata_names: Tuple[str, ...] = ()
    config_digest: str = ""

    @property
    def channels(self) -> int:
        return int(self.train.states.shape[1])

    @property
    def length(self) -> int:
        return int(self.train.states.shape[2])

    def loss_mask(self) -> np.ndarray:
        return np.broadcast_to(self.mask[None, None, :], (1, self.channels, self.length))


@dataclass
class EpochArchive:
    truth: TruthRun
    pairs: Dict[int, List[NudgingPair]] = field(default_factory=dict)
    records: Dict[int, RunRecord] = field(default_factory=dict)


def epoch_start(split: DatasetConfig, epoch: int) -> int:
    return epoch * (split.windows_per_epoch + split.gap_windows)


def generate_epochs(cfg: SystemConfig, split: DatasetConfig, seed: int) -> EpochArchive:
    """Disjoint epochs cut from one long reference run, separated by gap windows."""
    total = epoch_start(split, split.epochs - 1) + split.windows_per_epoch
    truth = run_truth(cfg, total, seed)
    archive = EpochArchive(truth=truth)
    for e in range(split.epochs):
        record, pairs = run_nudged(cfg, truth, split.windows_per_epoch, start_window=epoch_start(split, e), epoch=e)
        archive.pairs[e] = pairs
        archive.records[e] = record
        log.info("toyclimate.epoch", epoch=e, samples=len(pairs))
    return archive


def _stack(pairs: Sequence[NudgingPair]) -> Tuple[np.ndarray, ...]:
    return (
        np.stack([p.state for p in pairs]),
        np.stack([p.tendency for p in pairs]),
        np.stack([p.metadata.values for p in pairs]),
        np.asarray([p.epoch for p in pairs], dtype=np.int64),
        np.asarray([p.t0 for p in pairs], dtype=np.float64),
    )


def build_dataset(
    epochs: Mapping[int, Sequence[NudgingPair]],
    split: DatasetConfig,
    mask: Optional[np.ndarray] = None,
    window: int = 6,
    dt: float = 0.005,
    channel_names: Sequence[str] = CHANNEL_NAMES,
) -> Dataset:
    """Normalized train/test splits; statistics come from the train epochs only."""
    overlap = sorted(set(split.train_epochs) & set(split.test_epochs))
    if overlap:
        raise SplitOverlapError(f"epochs {overlap} appear in both train and test splits", epochs=overlap)
    missing = sorted((set(split.train_epochs) | set(split.test_epochs)) - set(epochs))
    if missing or not split.train_epochs or not split.test_epochs:
        raise ConfigError("dataset split names epochs that were not generated", violations=[f"dataset: missing epochs {missing}"])
    train_pairs = [p for e in split.train_epochs for p in epochs[e]]
    test_pairs = [p for e in split.test_epochs for p in epochs[e]]
    s_tr, t_tr, m_tr, e_tr, t0_tr = _stack(train_pairs)
    s_te, t_te, m_te, e_te, t0_te = _stack(test_pairs)
    length = s_tr.shape[2]
    if length % split.subsample:
        raise ShapeError(f"grid length {length} not divisible by subsample factor {split.subsample}")
    stats = compute_stats(s_tr, t_tr, channel_names)
    train = DatasetSplit(normalize(s_tr, stats, "state"), normalize(t_tr, stats, "tendency"), m_tr, e_tr, t0_tr)
    test = DatasetSplit(normalize(s_te, stats, "state"), normalize(t_te, stats, "tendency"), m_te, e_te, t0_te)
    names = train_pairs[0].metadata.names
    dataset = Dataset(
        train=train,
        test=test,
        stats=stats,
        mask=np.ones(length) if mask is None else np.asarray(mask, dtype=np.float64),
        subsample=split.subsample,
        window=window,
        dt=dt,
        channel_names=tuple(channel_names),
        metadata_names=tuple(names),
    )
    log.info("dataset.built", train=len(train), test=len(test), channels=dataset.channels, length=length)
    return dataset
