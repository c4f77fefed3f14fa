from __future__ import annotations

import pathlib
from typing import Any, Dict, List, Optional

import structlog

from . import activities
from .config import ONLINE_WORKERS, ExperimentConfig
from .errors import NudgeError

log = structlog.get_logger(__name__)


class ExperimentPipeline:
    """generate -> train -> eval-offline -> verify-rank -> run-online -> report in one output tree."""

    def __init__(self, cfg: ExperimentConfig, out: Optional[pathlib.Path] = None, workers: int = ONLINE_WORKERS) -> None:
        self.cfg = cfg
        self.out = pathlib.Path(out) if out is not None else cfg.output_dir
        self.workers = workers
        self.step: str = "INIT"
        self.errors: List[str] = []
        self.results: Dict[str, Dict[str, Any]] = {}

    @property
    def dataset_path(self) -> pathlib.Path:
        return self.out / activities.DATASET_FILE

    @property
    def checkpoint_path(self) -> pathlib.Path:
        return self.out / activities.CHECKPOINT_FILE

    def _online_groups(self) -> List[tuple]:
        groups = []
        for seed in self.cfg.coupling.seeds:
            seed_dir = self.out / "online" / f"seed_{seed}"
            runs = [seed_dir / f"{name}.run" for name in ("control", "nudged", "corrected")]
            groups.append((seed_dir / "truth.run", runs))
        return groups

    async def run(self) -> Dict[str, Any]:
        cfg = self.cfg
        needs_model = cfg.coupling.corrector == "checkpoint"
        try:
            self.step = "GENERATE"
            self.results["generate"] = await activities.generate_dataset(cfg, self.out)

            if needs_model:
                self.step = "TRAIN"
                self.results["train"] = await activities.train_model(cfg, self.dataset_path, self.out)

                self.step = "EVALUATE"
                self.results["eval-offline"] = await activities.evaluate_checkpoint(cfg, self.checkpoint_path, self.dataset_path, self.out / "offline")

                self.step = "VERIFY_RANK"
                self.results["verify-rank"] = await activities.verify_rank(cfg, self.checkpoint_path, self.out)

            self.step = "ONLINE"
            checkpoint = self.checkpoint_path if needs_model else None
            self.results["run-online"] = await activities.run_online(cfg, checkpoint, self.out / "online", self.workers)

            self.step = "REPORT"
            self.results["report"] = await activities.build_report(cfg, self._online_groups(), self.out / "report")

            self.step = "DONE"
            log.info("pipeline.completed", out=str(self.out), digest=cfg.digest()[:12])
            return {"status": "completed", "step": self.step, "results": self.results, "errors": self.errors}
        except NudgeError as e:
            self.errors.append(f"{e.code}: {e.message}")
            log.error("pipeline.failed", step=self.step, code=e.code, error=e.message)
            return {"status": "failed", "step": self.step, "results": self.results, "errors": self.errors}

    def status(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "errors": self.errors,
            "completed": sorted(self.results),
            "out": str(self.out),
            "config_digest": self.cfg.digest(),
        }
