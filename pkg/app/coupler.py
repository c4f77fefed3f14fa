"""Online coupling: inject a window-mean correction into the free-running biased model.

Correctors see only the instantaneous model state at a window start (or every
step) and return a physical-unit tendency. Nothing here reads the reference
archive except the comparison in :func:`climatology_compare`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Protocol

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .archs import Checkpoint, ModelGraph, restore_model
from .errors import ConfigError, DigestError, HorizonError, NonFiniteError, ShapeError, StatsMismatchError
from .fields import IntTuple
from .metrics import pattern_correlation, significance_mask
from .toyclimate import (
    RunRecord,
    SystemConfig,
    TruthRun,
    check_finite,
    denormalize,
    metadata_at,
    normalize,
    run_truth,
    spun_up_state,
    step_free,
)

log = structlog.get_logger(__name__)


class CouplingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    cadence: Literal["window_start", "every_step"] = "window_start"
    window: int = Field(6, ge=1)
    scaling: Literal["window_integral", "spread"] = "window_integral"
    corrector: Literal["checkpoint", "zero", "stored_oracle"] = "checkpoint"
    horizon_windows: int = Field(200, ge=1)
    seeds: IntTuple = (1,)
    magnitude_cap: Optional[float] = Field(None, gt=0.0)
    expected_stats_digest: Optional[str] = None


class Corrector(Protocol):
    name: str

    def __call__(self, state: np.ndarray, t: float, window: int) -> np.ndarray: ...


class ZeroCorrector:
    name = "zero"

    def __call__(self, state: np.ndarray, t: float, window: int) -> np.ndarray:
        return np.zeros_like(state)


class StoredOracleCorrector:
    """Replays archived window-mean nudging tendencies, (windows, C, L)."""

    name = "stored_oracle"

    def __init__(self, tendencies: np.ndarray) -> None:
        self.tendencies = np.asarray(tendencies, dtype=np.float64)

    def __call__(self, state: np.ndarray, t: float, window: int) -> np.ndarray:
        if window >= self.tendencies.shape[0]:
            raise HorizonError(f"stored tendencies cover {self.tendencies.shape[0]} windows, window {window} requested", window=window)
        return self.tendencies[window]


class ModelCorrector:
    """normalize -> forward -> denormalize with the checkpoint's own statistics."""

    name = "checkpoint"

    def __init__(self, checkpoint: Checkpoint, system: SystemConfig, model: Optional[ModelGraph] = None) -> None:
        if checkpoint.stats is None:
            raise StatsMismatchError("checkpoint carries no normalization statistics")
        self.checkpoint = checkpoint
        self.stats = checkpoint.stats
        self.system = system
        self.model = model if model is not None else restore_model(checkpoint)

    def __call__(self, state: np.ndarray, t: float, window: int) -> np.ndarray:
        x = normalize(state, self.stats, "state")[None]
        mu = metadata_at(self.system, t).values[None]
        out = self.model.forward(x, mu, mode="eval").data[0]
        return denormalize(out, self.stats, "tendency")


def make_corrector(
    coupling: CouplingConfig,
    system: SystemConfig,
    checkpoint: Optional[Checkpoint] = None,
    stored: Optional[np.ndarray] = None,
) -> Corrector:
    if coupling.corrector == "zero":
        return ZeroCorrector()
    if coupling.corrector == "stored_oracle":
        if stored is None:
            raise ConfigError("stored_oracle corrector needs archived tendencies", violations=["coupling.corrector: no archive"])
        return StoredOracleCorrector(stored)
    if checkpoint is None:
        raise ConfigError("checkpoint corrector needs a checkpoint", violations=["coupling.corrector: no checkpoint"])
    if checkpoint.window != coupling.window:
        raise ConfigError(
            f"checkpoint trained on window {checkpoint.window}, coupling uses {coupling.window}",
            violations=[f"coupling.window: {coupling.window} != {checkpoint.window}"],
        )
    if coupling.expected_stats_digest is not None and checkpoint.stats_digest != coupling.expected_stats_digest:
        raise DigestError(
            "checkpoint normalization digest differs from the run configuration",
            expected=coupling.expected_stats_digest,
            actual=checkpoint.stats_digest,
        )
    return ModelCorrector(checkpoint, system)


def _start(system: SystemConfig, seed: int, initial: Optional[np.ndarray]) -> np.ndarray:
    if initial is not None:
        x = np.array(initial, dtype=np.float64)
        if x.shape != (system.sites,):
            raise ShapeError(f"initial slow state must have {system.sites} entries, got {x.shape}")
        return x
    return spun_up_state(system, seed)[: system.sites].copy()


def run_controlled(system: SystemConfig, horizon: int, seed: int, initial: Optional[np.ndarray] = None, config_digest: str = "") -> RunRecord:
    """Free-running biased model, snapshots at window boundaries."""
    w = system.window
    x = _start(system, seed, initial)
    snapshots = [x.copy()]
    for s in range(horizon * w):
        x = step_free(x, system, t=s * system.dt)
        check_finite(x, s + 1, "control")
        if (s + 1) % w == 0:
            snapshots.append(x.copy())
    log.info("coupler.control", horizon=horizon, seed=seed)
    return RunRecord(
        provenance="control",
        snapshots=np.stack(snapshots)[:, None, :],
        window=w,
        dt=system.dt,
        seed=seed,
        config_digest=config_digest,
    )


def _cap(tendency: np.ndarray, cap: Optional[float]) -> np.ndarray:
    return tendency if cap is None else np.clip(tendency, -cap, cap)


def run_corrected(
    system: SystemConfig,
    coupling: CouplingConfig,
    corrector: Corrector,
    horizon: int,
    seed: int,
    initial: Optional[np.ndarray] = None,
    config_digest: str = "",
) -> RunRecord:
    """Biased model plus the corrector's tendency under the configured cadence and scaling.

    window_start + window_integral injects W times the prediction during the first
    step of each window; window_start + spread injects the prediction at every step
    of the window; every_step queries the corrector at every step.
    """
    w = system.window
    if coupling.window != w:
        raise ConfigError(f"coupling window {coupling.window} != system window {w}", violations=["coupling.window"])
    x = _start(system, seed, initial)
    snapshots = [x.copy()]
    increments = []
    corrections = []
    for j in range(horizon):
        s0 = j * w
        window_increment = np.zeros_like(x)
        correction = np.zeros_like(x)
        for i in range(w):
            s = s0 + i
            t = s * system.dt
            if coupling.cadence == "every_step" or i == 0:
                correction = np.asarray(corrector(x[None, :], t, j), dtype=np.float64)[0]
                if not np.all(np.isfinite(correction)):
                    raise NonFiniteError(f"corrector returned non-finite tendency at step {s}", step=s)
                correction = _cap(correction, coupling.magnitude_cap)
                if i == 0:
                    corrections.append(correction.copy())
            if coupling.cadence == "every_step" or coupling.scaling == "spread":
                inject = correction
            else:
                inject = w * correction if i == 0 else np.zeros_like(x)
            extra = inject if np.any(inject) else None
            x = step_free(x, system, t=t, extra=extra)
            check_finite(x, s + 1, "corrected")
            if extra is not None:
                window_increment = window_increment + extra * system.dt
        increments.append(window_increment)
        snapshots.append(x.copy())
    log.info("coupler.corrected", horizon=horizon, seed=seed, corrector=corrector.name, cadence=coupling.cadence, scaling=coupling.scaling)
    return RunRecord(
        provenance="corrected",
        snapshots=np.stack(snapshots)[:, None, :],
        window=w,
        dt=system.dt,
        seed=seed,
        config_digest=config_digest,
        cadence=coupling.cadence,
        scaling=coupling.scaling,
        corrector=corrector.name,
        increments=np.stack(increments)[:, None, :],
        corrections=np.stack(corrections)[:, None, :],
    )


def reference_run(system: SystemConfig, horizon: int, seed: int) -> TruthRun:
    """Two-scale reference over the same horizon, started from the same spun-up state."""
    return run_truth(system, horizon, seed)


# ---------------------------------------------------------------------------
# climatology comparison


@dataclass
class ClimateRow:
    name: str
    rmse: float
    pct_change: float
    mean_bias: float
    pcc_time_mean: Optional[float]
    bias_profile: np.ndarray
    significant: Optional[np.ndarray] = None

    def as_row(self) -> Dict[str, object]:
        return {
            "experiment": self.name,
            "rmse": self.rmse,
            "pct_change": self.pct_change,
            "mean_bias": self.mean_bias,
            "pcc_time_mean": self.pcc_time_mean,
            "significant_sites": None if self.significant is None else int(self.significant.sum()),
        }


@dataclass
class ClimateReport:
    rows: Dict[str, ClimateRow] = field(default_factory=dict)
    control: str = "control"

    def table(self) -> List[Dict[str, object]]:
        return [row.as_row() for row in self.rows.values()]


CLIMATE_COLUMNS = ("experiment", "rmse", "pct_change", "mean_bias", "pcc_time_mean", "significant_sites")


def climatology_compare(
    records: Mapping[str, RunRecord],
    truth: RunRecord,
    control_key: str = "control",
    alpha: float = 0.05,
) -> ClimateReport:
    """RMSE of window-boundary states against the reference and percent change against control.

    The significance mask tests the time-mean bias per site once a run has at least
    eight boundary snapshots.
    """
    if control_key not in records:
        raise ConfigError(f"no {control_key!r} record to compare against", violations=[f"records: missing {control_key}"])
    for name, record in records.items():
        if record.snapshots.shape != truth.snapshots.shape:
            raise HorizonError(
                f"{name} snapshots {record.snapshots.shape} do not line up with the reference {truth.snapshots.shape}",
                experiment=name,
            )
    reference_mean = truth.snapshots.mean(axis=0)

    def rmse(record: RunRecord) -> float:
        return float(np.sqrt(np.mean((record.snapshots - truth.snapshots) ** 2)))

    base = rmse(records[control_key])
    report = ClimateReport(control=control_key)
    for name, record in records.items():
        bias = record.snapshots - truth.snapshots
        value = rmse(record)
        if base == 0.0:
            pct = 0.0 if value == 0.0 else float("inf")
        else:
            pct = 100.0 * (value - base) / base
        time_mean = record.snapshots.mean(axis=0)
        mask = significance_mask(bias, alpha) if bias.shape[0] >= 8 else None
        report.rows[name] = ClimateRow(
            name=name,
            rmse=value,
            pct_change=pct,
            mean_bias=float(bias.mean()),
            pcc_time_mean=pattern_correlation(time_mean, reference_mean),
            bias_profile=bias.mean(axis=0),
            significant=mask,
        )
        log.info("coupler.compare", experiment=name, rmse=value, pct_change=pct)
    return report
