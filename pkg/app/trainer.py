from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from .archs import Checkpoint, ModelGraph, make_checkpoint, restore_model
from .errors import NonFiniteError, SingularSystemError, SplitOverlapError, StatsMismatchError, TrainingDivergedError
from .metrics import MetricTable, SpectrumReport, pattern_correlation, pointwise_metrics, power_spectrum, temporal_correlation
from .tensorcore import OptimizerState, adam_step, mse_loss
from .toyclimate import Dataset, DatasetSplit, denormalize

log = structlog.get_logger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(5e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    seed: int = 0
    patience: Optional[int] = Field(None, ge=1)
    min_delta: float = Field(0.0, ge=0.0)
    checkpoint_every: Optional[int] = Field(None, ge=1)
    ridge_lambda: float = Field(1e-3, ge=0.0)


class Predictor(Protocol):
    def predict(self, states: np.ndarray, metadata: np.ndarray) -> np.ndarray: ...


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: List[float]
    initial_loss: float
    final_loss: float
    epochs_run: int
    stopped_early: bool = False


def _eval_loss(model: ModelGraph, split: DatasetSplit, mask: np.ndarray) -> float:
    pred = model.predict(split.states, split.metadata)
    w = np.broadcast_to(mask, pred.shape)
    return float(np.sum(((pred - split.tendencies) * w) ** 2) / np.sum(w))


def train(
    model: ModelGraph,
    dataset: Dataset,
    cfg: TrainConfig,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainResult:
    """Minibatch Adam on masked MSE of normalized tendencies.

    Shuffles and dropout masks come from ``cfg.seed`` only, so variants trained with one
    config see identical sample streams and update counts.
    """
    digest = dataset.stats.digest()
    if model.stats_digest is not None and model.stats_digest != digest:
        raise StatsMismatchError("dataset normalization differs from the model's reference", expected=model.stats_digest, actual=digest)
    if model.config.subsample != dataset.subsample:
        raise StatsMismatchError(f"model subsample {model.config.subsample} != dataset subsample {dataset.subsample}")
    model.stats_digest = digest

    split = dataset.train
    mask = dataset.loss_mask()
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    initial = _eval_loss(model, split, mask)
    losses: List[float] = []
    last_good = model.store.snapshot()
    best, stale, stopped = float("inf"), 0, False
    n = len(split)
    log.info("train.start", variant=model.config.variant, params=model.param_count(), samples=n, epochs=cfg.epochs, initial_loss=initial)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                model.store.zero_grad()
                pred = model.forward(split.states[idx], split.metadata[idx], mode="train", rng=dropout_rng)
                loss = mse_loss(pred, split.tendencies[idx], mask=mask)
                loss.backward()
                adam_step(model.store, None, state)
                total += loss.item() * len(idx)
            epoch_loss = total / n
            if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p.data)) for p in model.store.parameters()):
                raise NonFiniteError("non-finite loss or parameters", epoch=epoch)
        except NonFiniteError as exc:
            model.store.restore(last_good)
            log.error("train.diverged", epoch=epoch, error=str(exc))
            raise TrainingDivergedError(f"training diverged at epoch {epoch}", epoch=epoch, last_good=last_good) from exc
        last_good = model.store.snapshot()
        model.epoch = epoch
        losses.append(epoch_loss)
        log.debug("train.epoch", epoch=epoch, loss=epoch_loss)
        if on_checkpoint is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            on_checkpoint(make_checkpoint(model, dataset.window, dataset.stats, losses))
        if cfg.patience is not None:
            if epoch_loss < best - cfg.min_delta:
                best, stale = epoch_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    stopped = True
                    log.info("train.early_stop", epoch=epoch, loss=epoch_loss)
                    break

    final = _eval_loss(model, split, mask)
    log.info("train.done", variant=model.config.variant, epochs=model.epoch, initial_loss=initial, final_loss=final)
    return TrainResult(
        checkpoint=make_checkpoint(model, dataset.window, dataset.stats, losses),
        losses=losses,
        initial_loss=initial,
        final_loss=final,
        epochs_run=model.epoch,
        stopped_early=stopped,
    )


@dataclass
class EvalReport:
    tables: Dict[str, MetricTable]
    pcc_time_mean: Dict[str, Optional[float]]
    tcc_field: np.ndarray
    tcc_curve: np.ndarray
    spectra: Dict[str, SpectrumReport] = field(default_factory=dict)
    samples: int = 0


def check_split(dataset: Dataset) -> None:
    leaked = sorted(set(dataset.train.epochs.tolist()) & set(dataset.test.epochs.tolist()))
    if leaked:
        raise SplitOverlapError(f"test samples come from training epochs {leaked}", epochs=leaked)


def evaluate_predictions(pred_norm: np.ndarray, dataset: Dataset) -> EvalReport:
    """Metrics in physical units over unmasked sites of the test split."""
    split = dataset.test
    pred = denormalize(pred_norm, dataset.stats, "tendency")
    true = denormalize(split.tendencies, dataset.stats, "tendency")
    active = dataset.mask > 0.0
    tables: Dict[str, MetricTable] = {}
    pcc: Dict[str, Optional[float]] = {}
    for c, name in enumerate(dataset.channel_names):
        p, t = pred[:, c][:, active], true[:, c][:, active]
        tables[name] = pointwise_metrics(p, t)
        pcc[name] = pattern_correlation(p.mean(axis=0), t.mean(axis=0))
    tcc = temporal_correlation(pred[..., active], true[..., active])
    spectra = {"predicted": power_spectrum(pred), "true": power_spectrum(true)}
    return EvalReport(tables=tables, pcc_time_mean=pcc, tcc_field=tcc.field, tcc_curve=tcc.curve, spectra=spectra, samples=len(split))


def evaluate_offline(source: object, dataset: Dataset) -> EvalReport:
    """Evaluate a checkpoint, a built model or any predictor on the held-out epochs."""
    check_split(dataset)
    if isinstance(source, Checkpoint):
        if source.stats_digest is not None and source.stats_digest != dataset.stats.digest():
            raise StatsMismatchError("checkpoint normalization differs from the dataset", expected=source.stats_digest)
        source = restore_model(source)
    report = evaluate_predictions(source.predict(dataset.test.states, dataset.test.metadata), dataset)
    for name, table in report.tables.items():
        log.info("eval.offline", channel=name, r2=table.r2, rmse=table.rmse, pcc=report.pcc_time_mean[name])
    return report


# ---------------------------------------------------------------------------
# ridge baseline


def _stencil(states: np.ndarray, site: int, radius: int) -> np.ndarray:
    length = states.shape[2]
    idx = [(site + d) % length for d in range(-radius, radius + 1)]
    return states[:, :, idx].reshape(states.shape[0], -1)


@dataclass
class RidgeBaseline:
    """Per-site, per-channel linear map from a periodic input stencil to the tendency."""

    coefficients: np.ndarray
    feature_mean: np.ndarray
    target_mean: np.ndarray
    radius: int = 2
    lam: float = 1e-3

    def predict(self, states: np.ndarray, metadata: Optional[np.ndarray] = None) -> np.ndarray:
        n, channels, length = states.shape
        out = np.empty((n, channels, length))
        for s in range(length):
            feats = _stencil(states, s, self.radius) - self.feature_mean[s]
            out[:, :, s] = feats @ self.coefficients[s] + self.target_mean[s]
        return out


def fit_ridge(states: np.ndarray, targets: np.ndarray, lam: float, radius: int = 2) -> RidgeBaseline:
    n, channels, length = states.shape
    p = channels * (2 * radius + 1)
    coefficients = np.empty((length, p, channels))
    feature_mean = np.empty((length, p))
    target_mean = np.empty((length, channels))
    for s in range(length):
        feats = _stencil(states, s, radius)
        fm = feats.mean(axis=0)
        tm = targets[:, :, s].mean(axis=0)
        x = feats - fm
        y = targets[:, :, s] - tm
        gram = x.T @ x + lam * np.eye(p)
        try:
            coef = linalg.solve(gram, x.T @ y, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularSystemError(f"normal equations singular at site {s} (lambda={lam})", site=s) from exc
        if lam == 0.0 and np.linalg.matrix_rank(gram) < p:
            raise SingularSystemError(f"normal equations singular at site {s} (lambda=0)", site=s)
        coefficients[s], feature_mean[s], target_mean[s] = coef, fm, tm
    return RidgeBaseline(coefficients=coefficients, feature_mean=feature_mean, target_mean=target_mean, radius=radius, lam=lam)


def baseline_ridge(dataset: Dataset, lam: float = 1e-3, radius: int = 2) -> tuple[RidgeBaseline, EvalReport]:
    if len(dataset.train) == 0:
        raise SingularSystemError("ridge baseline needs a non-empty train split")
    model = fit_ridge(dataset.train.states, dataset.train.tendencies, lam, radius)
    report = evaluate_offline(model, dataset)
    return model, report
