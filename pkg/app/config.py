from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import pathlib
import sys
from typing import Dict, List, Literal, Optional, Type, Union

import structlog
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .archs import ArchitectureConfig, preset_config
from .conditioning import METADATA_CHANNELS
from .coupler import CouplingConfig
from .errors import ConfigError
from .toyclimate import CHANNEL_NAMES, DatasetConfig, SystemConfig
from .trainer import TrainConfig

load_dotenv()

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("NUDGE_OUTPUT_DIR", "runs")
ONLINE_WORKERS = int(os.getenv("NUDGE_ONLINE_WORKERS", "4"))


def _stderr_logger(*_args: object) -> structlog.PrintLogger:
    return structlog.PrintLogger(sys.stderr)


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Key=value lines on stderr; stdout stays free for the one-line summaries."""
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.getLevelName(level.upper())),
        logger_factory=_stderr_logger,
        cache_logger_on_first_use=False,
    )


class ModelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Literal["unet", "unet_mp", "iunet", "mnm"] = "mnm"
    preset: Literal["toy", "small", "large"] = "small"
    depth: int = Field(2, ge=1, le=5)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    activation: Literal["gelu", "relu"] = "gelu"
    padding_mode: Literal["zeros", "circular"] = "zeros"
    base: Optional[int] = Field(None, ge=1)
    film_hidden: Optional[int] = Field(None, ge=1)
    meta_embed: Optional[int] = Field(None, ge=1)


class OutputSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    directory: str = OUTPUT_DIR


class ExperimentSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "nudge"
    seed: int = 0


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    system: SystemConfig = SystemConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelSettings = ModelSettings()
    training: TrainConfig = TrainConfig()
    coupling: CouplingConfig = CouplingConfig()
    output: OutputSettings = OutputSettings()
    experiment: ExperimentSettings = ExperimentSettings()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def data_digest(self) -> str:
        """Digest of the sections a dataset depends on; model and training changes keep it."""
        part = {"system": self.system.model_dump(mode="json"), "dataset": self.dataset.model_dump(mode="json"), "seed": self.seed}
        return hashlib.sha256(json.dumps(part, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(
            update={
                "experiment": self.experiment.model_copy(update={"seed": seed}),
                "training": self.training.model_copy(update={"seed": seed}),
            }
        )

    def with_model(self, variant: Optional[str] = None, preset: Optional[str] = None) -> "ExperimentConfig":
        update = {k: v for k, v in (("variant", variant), ("preset", preset)) if v is not None}
        if not update:
            return self
        return _validated(self.model_copy(update={"model": self.model.model_copy(update=update)}))

    def architecture(self) -> ArchitectureConfig:
        m = self.model
        cfg = preset_config(
            m.variant,
            m.preset,
            depth=m.depth,
            channels=len(CHANNEL_NAMES),
            length=self.system.sites,
            metadata_channels=len(METADATA_CHANNELS),
            dropout=m.dropout,
            subsample=self.dataset.subsample,
            activation=m.activation,
            padding_mode=m.padding_mode,
        )
        overrides = {k: v for k, v in (("base", m.base), ("film_hidden", m.film_hidden), ("meta_embed", m.meta_embed)) if v is not None}
        return cfg.model_copy(update=overrides) if overrides else cfg

    @property
    def output_dir(self) -> pathlib.Path:
        return pathlib.Path(self.output.directory)


_SECTIONS: Dict[str, Type[BaseModel]] = {
    "system": SystemConfig,
    "dataset": DatasetConfig,
    "model": ModelSettings,
    "training": TrainConfig,
    "coupling": CouplingConfig,
    "output": OutputSettings,
    "experiment": ExperimentSettings,
}

_NONE = {"", "none", "null"}


def _value(raw: str) -> Optional[str]:
    text = raw.strip()
    return None if text.lower() in _NONE else text


def _violations(section: str, exc: ValidationError) -> List[str]:
    return [f"{section}.{'.'.join(str(p) for p in err['loc']) or '<section>'}: {err['msg']}" for err in exc.errors()]


def _cross_checks(cfg: ExperimentConfig) -> List[str]:
    problems = []
    if cfg.coupling.window != cfg.system.window:
        problems.append(f"coupling.window: {cfg.coupling.window} differs from system.window {cfg.system.window}")
    if cfg.system.sites % cfg.dataset.subsample:
        problems.append(f"dataset.subsample: {cfg.dataset.subsample} does not divide system.sites {cfg.system.sites}")
    internal = cfg.system.sites // cfg.dataset.subsample
    if internal % 2**cfg.model.depth:
        problems.append(f"model.depth: 2**{cfg.model.depth} does not divide internal grid length {internal}")
    overlap = sorted(set(cfg.dataset.train_epochs) & set(cfg.dataset.test_epochs))
    if overlap:
        problems.append(f"dataset.test_epochs: {overlap} also listed in train_epochs")
    beyond = sorted(e for e in set(cfg.dataset.train_epochs) | set(cfg.dataset.test_epochs) if not 0 <= e < cfg.dataset.epochs)
    if beyond:
        problems.append(f"dataset: epochs {beyond} outside 0..{cfg.dataset.epochs - 1}")
    return problems


def _validated(cfg: ExperimentConfig) -> ExperimentConfig:
    problems = _cross_checks(cfg)
    if problems:
        raise ConfigError(f"{len(problems)} configuration violation(s)", violations=problems)
    return cfg


def parse_config_text(text: str) -> ExperimentConfig:
    """Strict sectioned key=value parsing; every violation is reported in one ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("configuration file is not valid key=value sections", violations=[str(exc).splitlines()[0]]) from exc

    problems: List[str] = []
    sections: Dict[str, BaseModel] = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            problems.append(f"{name}: unknown section")
            continue
        values = {key: _value(value) for key, value in parser.items(name)}
        try:
            sections[name] = _SECTIONS[name](**values)
        except ValidationError as exc:
            problems.extend(_violations(name, exc))
    if problems:
        raise ConfigError(f"{len(problems)} configuration violation(s)", violations=problems)
    return _validated(ExperimentConfig(**sections))


def load_config(path: Union[str, pathlib.Path]) -> ExperimentConfig:
    p = pathlib.Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found", violations=[f"--config: {p} does not exist"])
    return parse_config_text(p.read_text())

