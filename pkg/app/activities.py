"""One unit of work per pipeline step.

Each activity reads its inputs from artifact files, does the numeric work off the
event loop and writes its outputs under the output directory. The returned dict
is the step's one-line summary.
"""
from __future__ import annotations

import asyncio
import json
import pathlib
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from .archs import Checkpoint, build_model, restore_model
from .config import ONLINE_WORKERS, ExperimentConfig
from .coupler import CLIMATE_COLUMNS, climatology_compare, make_corrector, reference_run, run_controlled, run_corrected
from .errors import ConfigError
from .metrics import METRIC_COLUMNS, mask_csv, metric_rows, spectrum_csv, table_csv
from .ranklab import all_injective, format_rank_reports, injectivity_report
from .store import load_artifact, save_artifact
from .toyclimate import Dataset, RunRecord, build_dataset, generate_epochs, run_nudged
from .trainer import EvalReport, baseline_ridge, evaluate_offline, train

log = structlog.get_logger(__name__)

DATASET_FILE = "dataset.nodc"
CHECKPOINT_FILE = "model.ckpt"
EVAL_FILE = "eval.rpt"
RANK_FILE = "rank.txt"
REPORT_FILE = "report.rpt"


def _out(path: pathlib.Path) -> pathlib.Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# generate


def make_dataset(cfg: ExperimentConfig) -> Dataset:
    archive = generate_epochs(cfg.system, cfg.dataset, cfg.seed)
    dataset = build_dataset(
        archive.pairs,
        cfg.dataset,
        mask=cfg.system.site_mask(),
        window=cfg.system.window,
        dt=cfg.system.dt,
    )
    dataset.config_digest = cfg.data_digest()
    return dataset


async def generate_dataset(cfg: ExperimentConfig, out: pathlib.Path) -> Dict[str, Any]:
    dataset = await asyncio.to_thread(make_dataset, cfg)
    path = save_artifact(_out(out) / DATASET_FILE, "dataset", dataset, cfg.data_digest())
    (out / "stats.json").write_text(json.dumps(dataset.stats.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("activity.generate", train=len(dataset.train), test=len(dataset.test))
    return {
        "status": "ok",
        "command": "generate",
        "samples": len(dataset.train) + len(dataset.test),
        "train": len(dataset.train),
        "test": len(dataset.test),
        "path": str(path),
    }


# ---------------------------------------------------------------------------
# train / evaluate


def _train_sync(cfg: ExperimentConfig, dataset: Dataset, out: pathlib.Path) -> Tuple[Checkpoint, Dict[str, Any]]:
    model = build_model(cfg.architecture(), seed=cfg.training.seed)
    ckpt_dir = out / "checkpoints"

    def keep(ckpt: Checkpoint) -> None:
        save_artifact(ckpt_dir / f"epoch_{ckpt.epoch:04d}.ckpt", "checkpoint", ckpt, cfg.digest())

    result = train(model, dataset, cfg.training, on_checkpoint=keep)
    (out / "losses.csv").write_text(table_csv([{"epoch": i + 1, "loss": v} for i, v in enumerate(result.losses)], ["epoch", "loss"]))
    summary = {
        "variant": model.config.variant,
        "params": model.param_count(),
        "epochs": result.epochs_run,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "stopped_early": result.stopped_early,
    }
    return result.checkpoint, summary


async def train_model(cfg: ExperimentConfig, dataset_path: pathlib.Path, out: pathlib.Path) -> Dict[str, Any]:
    dataset = load_artifact(dataset_path, "dataset", cfg.data_digest()).obj
    checkpoint, summary = await asyncio.to_thread(_train_sync, cfg, dataset, _out(out))
    path = save_artifact(out / CHECKPOINT_FILE, "checkpoint", checkpoint, cfg.digest())
    return {"status": "ok", "command": "train", "path": str(path), **summary}


def eval_tables(report: EvalReport, ridge: Optional[EvalReport] = None) -> Dict[str, str]:
    rows = [{"model": "network", **row} for row in metric_rows(report.tables)]
    if ridge is not None:
        rows += [{"model": "ridge", **row} for row in metric_rows(ridge.tables)]
    tcc = [{"site": i, **{f"c{c}": float(v) for c, v in enumerate(report.tcc_field[:, i])}} for i in range(report.tcc_field.shape[1])]
    tables = {
        "metrics.csv": table_csv(rows, ["model", "channel", *METRIC_COLUMNS]),
        "pcc.csv": table_csv([{"channel": k, "pcc_time_mean": v} for k, v in report.pcc_time_mean.items()], ["channel", "pcc_time_mean"]),
        "tcc.csv": table_csv(tcc, ["site"] + [f"c{c}" for c in range(report.tcc_field.shape[0])]),
        "spectra.csv": spectrum_csv(report.spectra),
    }
    return tables


def _evaluate_sync(cfg: ExperimentConfig, checkpoint: Checkpoint, dataset: Dataset) -> Tuple[EvalReport, EvalReport]:
    report = evaluate_offline(checkpoint, dataset)
    _, ridge = baseline_ridge(dataset, cfg.training.ridge_lambda)
    return report, ridge


async def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint_path: pathlib.Path, dataset_path: pathlib.Path, out: pathlib.Path) -> Dict[str, Any]:
    checkpoint = load_artifact(checkpoint_path, "checkpoint", cfg.digest()).obj
    dataset = load_artifact(dataset_path, "dataset", cfg.data_digest()).obj
    report, ridge = await asyncio.to_thread(_evaluate_sync, cfg, checkpoint, dataset)
    tables = eval_tables(report, ridge)
    out = _out(out)
    for name, text in tables.items():
        (out / name).write_text(text)
    path = save_artifact(out / EVAL_FILE, "report", tables, cfg.digest())
    first = next(iter(report.tables.values()))
    ridge_first = next(iter(ridge.tables.values()))
    return {
        "status": "ok",
        "command": "eval-offline",
        "path": str(path),
        "r2": first.r2,
        "ridge_r2": ridge_first.r2,
        "rmse": first.rmse,
        "samples": report.samples,
    }


# ---------------------------------------------------------------------------
# online


@dataclass
class SeedRuns:
    seed: int
    truth: RunRecord
    records: Dict[str, RunRecord]


def online_seed(cfg: ExperimentConfig, seed: int, checkpoint: Optional[Checkpoint]) -> SeedRuns:
    system, coupling = cfg.system, cfg.coupling
    horizon = coupling.horizon_windows
    digest = cfg.digest()
    truth = reference_run(system, horizon, seed)
    truth.record.config_digest = digest
    start = truth.record.snapshots[0, 0]
    control = run_controlled(system, horizon, seed, initial=start, config_digest=digest)
    nudged, _ = run_nudged(system, truth, horizon)
    nudged.config_digest = digest
    corrector = make_corrector(coupling, system, checkpoint=checkpoint, stored=nudged.corrections)
    corrected = run_corrected(system, coupling, corrector, horizon, seed, initial=start, config_digest=digest)
    return SeedRuns(seed=seed, truth=truth.record, records={"control": control, "nudged": nudged, "corrected": corrected})


async def run_online(
    cfg: ExperimentConfig,
    checkpoint_path: Optional[pathlib.Path],
    out: pathlib.Path,
    workers: int = ONLINE_WORKERS,
) -> Dict[str, Any]:
    """Truth, control, nudged and corrected runs per seed, fanned out over a bounded pool."""
    checkpoint = None
    if cfg.coupling.corrector == "checkpoint":
        if checkpoint_path is None:
            raise ConfigError("run-online with a checkpoint corrector needs --checkpoint", violations=["--checkpoint: missing"])
        checkpoint = load_artifact(checkpoint_path, "checkpoint", cfg.digest()).obj
    gate = asyncio.Semaphore(max(1, workers))

    async def one(seed: int) -> SeedRuns:
        async with gate:
            return await asyncio.to_thread(online_seed, cfg, seed, checkpoint)

    results = await asyncio.gather(*(one(s) for s in cfg.coupling.seeds))
    out = _out(out)
    paths: List[str] = []
    for runs in results:
        seed_dir = _out(out / f"seed_{runs.seed}")
        paths.append(str(save_artifact(seed_dir / "truth.run", "run", runs.truth, cfg.digest())))
        for name, record in runs.records.items():
            paths.append(str(save_artifact(seed_dir / f"{name}.run", "run", record, cfg.digest())))
    log.info("activity.online", seeds=list(cfg.coupling.seeds), corrector=cfg.coupling.corrector)
    return {"status": "ok", "command": "run-online", "seeds": list(cfg.coupling.seeds), "runs": len(paths), "path": str(out)}


# ---------------------------------------------------------------------------
# verify-rank


async def verify_rank(cfg: ExperimentConfig, checkpoint_path: Optional[pathlib.Path], out: pathlib.Path) -> Dict[str, Any]:
    if checkpoint_path is not None:
        model = restore_model(load_artifact(checkpoint_path, "checkpoint").obj)
    else:
        model = build_model(cfg.architecture(), seed=cfg.seed)
    reports = await asyncio.to_thread(injectivity_report, model)
    text = format_rank_reports(reports)
    path = _out(out) / RANK_FILE
    path.write_text(text)
    return {
        "status": "ok",
        "command": "verify-rank",
        "variant": model.config.variant,
        "levels": len(reports),
        "injective": all_injective(reports),
        "path": str(path),
    }


# ---------------------------------------------------------------------------
# report


def report_tables(
    groups: Sequence[Tuple[RunRecord, Sequence[RunRecord]]], alpha: float = 0.05
) -> Tuple[Dict[str, str], List[Dict[str, Any]]]:
    """Percent-RMSE and time-mean PCC tables over seeds; one group is (truth, runs) for one seed."""
    rows: List[Dict[str, Any]] = []
    per_experiment: Dict[str, List[Tuple[float, float, Optional[float]]]] = {}
    profiles: Dict[str, List[np.ndarray]] = {}
    masks: Dict[str, np.ndarray] = {}
    for truth, runs in groups:
        records = {r.provenance: r for r in runs}
        report = climatology_compare(records, truth, alpha=alpha)
        for name, row in report.rows.items():
            rows.append({"seed": truth.seed, **row.as_row()})
            per_experiment.setdefault(name, []).append((row.rmse, row.pct_change, row.pcc_time_mean))
            profiles.setdefault(name, []).append(row.bias_profile.reshape(-1))
            if row.significant is not None and name not in masks:
                masks[name] = row.significant.reshape(-1)
    summary = []
    for name, values in per_experiment.items():
        pccs = [p for _, _, p in values if p is not None]
        summary.append(
            {
                "experiment": name,
                "seeds": len(values),
                "rmse": float(np.mean([v[0] for v in values])),
                "pct_change": float(np.mean([v[1] for v in values])),
                "pcc_time_mean": float(np.mean(pccs)) if pccs else None,
            }
        )
    names = list(profiles)
    length = len(next(iter(profiles.values()))[0]) if profiles else 0
    bias_rows = [{"site": s, **{n: float(np.mean([p[s] for p in profiles[n]])) for n in names}} for s in range(length)]
    tables = {
        "climatology.csv": table_csv(rows, ["seed", *CLIMATE_COLUMNS]),
        "summary.csv": table_csv(summary, ["experiment", "seeds", "rmse", "pct_change", "pcc_time_mean"]),
        "bias_profile.csv": table_csv(bias_rows, ["site", *names]),
    }
    if masks:
        tables["significance.csv"] = mask_csv(np.stack([masks[n] for n in masks]))
    return tables, summary


async def build_report(
    cfg: ExperimentConfig,
    groups: Sequence[Tuple[pathlib.Path, Sequence[pathlib.Path]]],
    out: pathlib.Path,
) -> Dict[str, Any]:
    loaded = []
    for truth_path, run_paths in groups:
        truth = load_artifact(truth_path, "run").obj
        runs = [load_artifact(p, "run", truth.config_digest or None).obj for p in run_paths]
        loaded.append((truth, runs))
    tables, summary = report_tables(loaded)
    out = _out(out)
    for name, text in tables.items():
        (out / name).write_text(text)
    path = save_artifact(out / REPORT_FILE, "report", tables, cfg.digest())
    corrected = [row["pct_change"] for row in summary if row["experiment"] == "corrected"]
    return {
        "status": "ok",
        "command": "report",
        "path": str(path),
        "groups": len(loaded),
        "corrected_pct_change": corrected[0] if corrected else None,
    }
