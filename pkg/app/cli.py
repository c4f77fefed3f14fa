from __future__ import annotations

import argparse
import asyncio
import json
import pathlib
import sys
from typing import Any, Dict, List, Optional, Sequence

import structlog

from . import activities
from .config import ONLINE_WORKERS, ExperimentConfig, configure_logging, load_config
from .errors import ConfigError, NudgeError
from .workflows import ExperimentPipeline

log = structlog.get_logger(__name__)

COMMANDS = ("generate", "train", "eval-offline", "run-online", "verify-rank", "report", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nudge", description="Nudging-tendency bias correction experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=pathlib.Path, help="Experiment file with [system], [dataset], [model], ... sections")
        p.add_argument("--out", type=pathlib.Path, help="Output directory (default: [output] directory)")
        p.add_argument("--seed-override", type=int, help="Replace the experiment and training seed")
        p.add_argument("--preset", choices=("toy", "small", "large"), help="Model size preset")
        p.add_argument("--variant", choices=("unet", "unet_mp", "iunet", "mnm"), help="Model variant")
        return p

    add("generate", "Generate nudged training pairs and write the dataset")
    p = add("train", "Train the configured model on a dataset")
    p.add_argument("--dataset", type=pathlib.Path, help="Dataset artifact (default: <out>/dataset.nodc)")
    p = add("eval-offline", "Evaluate a checkpoint and the ridge baseline on the test epochs")
    p.add_argument("--dataset", type=pathlib.Path)
    p.add_argument("--checkpoint", type=pathlib.Path)
    p = add("run-online", "Control, nudged and corrected runs for every configured seed")
    p.add_argument("--checkpoint", type=pathlib.Path)
    p.add_argument("--workers", type=int, default=ONLINE_WORKERS)
    p = add("verify-rank", "Rank and injectivity of every decoder upsampler")
    p.add_argument("--checkpoint", type=pathlib.Path)
    p = add("report", "Percent-RMSE and pattern-correlation tables from run files")
    p.add_argument("--runs", type=pathlib.Path, nargs="+", required=True)
    p.add_argument("--truth", type=pathlib.Path, required=True)
    p = add("pipeline", "generate -> train -> eval-offline -> verify-rank -> run-online -> report")
    p.add_argument("--workers", type=int, default=ONLINE_WORKERS)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    return cfg.with_model(variant=args.variant, preset=args.preset)


async def run_command(args: argparse.Namespace) -> Dict[str, Any]:
    cfg = resolve_config(args)
    out: pathlib.Path = args.out if args.out is not None else cfg.output_dir
    cmd = args.command
    if cmd == "generate":
        return await activities.generate_dataset(cfg, out)
    if cmd == "train":
        return await activities.train_model(cfg, args.dataset or out / activities.DATASET_FILE, out)
    if cmd == "eval-offline":
        checkpoint = args.checkpoint or out / activities.CHECKPOINT_FILE
        return await activities.evaluate_checkpoint(cfg, checkpoint, args.dataset or out / activities.DATASET_FILE, out)
    if cmd == "run-online":
        return await activities.run_online(cfg, args.checkpoint, out, args.workers)
    if cmd == "verify-rank":
        return await activities.verify_rank(cfg, args.checkpoint, out)
    if cmd == "report":
        return await activities.build_report(cfg, [(args.truth, list(args.runs))], out)
    if cmd == "pipeline":
        pipeline = ExperimentPipeline(cfg, out, args.workers)
        result = await pipeline.run()
        if result["status"] != "completed":
            raise NudgeError(f"pipeline failed at {result['step']}", errors=result["errors"])
        return {"status": "ok", "command": "pipeline", **pipeline.status()}
    raise ConfigError(f"unknown command {cmd!r}", violations=[f"command: {cmd}"])


def _emit(record: Dict[str, Any]) -> None:
    print(json.dumps(record, sort_keys=True, default=str), flush=True)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 when verify-rank finds a rank-deficient level or on a crash, 2 on errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging()
    try:
        summary = asyncio.run(run_command(args))
    except NudgeError as e:
        log.error("cli.failed", command=args.command, code=e.code, error=e.message)
        _emit(e.as_record())
        return 2
    except Exception as e:
        log.exception("cli.crashed", command=args.command)
        _emit({"status": "error", "code": "internal", "message": str(e)})
        return 1
    _emit(summary)
    if args.command == "verify-rank" and not summary.get("injective", False):
        return 1
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
