"""Shared argument records and run plumbing for the command handlers."""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from pydantic import BaseModel, Field, field_validator

from app.config import ExperimentConfig, config_hash, get_settings, load_experiment_config
from app.errors import UsageError
from app.logging_config import get_logger
from app.services.checkpoint import load_checkpoint
from app.services.core import Episode, RngStream
from app.services.episodes import EpisodeSampler, Phase, build_sampler
from app.services.model import AMFormer
from app.storage.base import StorageBackend
from app.storage.factory import get_storage

logger = get_logger("commands")

# =============================================================================
# CONSTANTS
# =============================================================================

RUN_MANIFEST_PATH = "run_manifest.json"
DEFAULT_EVAL_EPISODES = 1000

# Stream key spawned from the run seed for held-out episodes.
TEST_STREAM = 3


# =============================================================================
# ARGUMENT RECORDS
# =============================================================================


class RunArgs(BaseModel):
    """Flags every command accepts. Unset flags fall back to the config."""

    config: str | None = None
    seed: int | None = None
    fold: int | None = Field(None, ge=0, le=3)
    k_shot: int | None = Field(None, ge=1)
    out_dir: str = "./runs/latest"
    workers: int = Field(1, ge=1)

    def overrides(self) -> dict:
        """Flag values as nested config keys; flags win over the config file."""
        values: dict = {}
        if self.fold is not None:
            values["fold"] = self.fold
        train = {}
        if self.seed is not None:
            train["seed"] = self.seed
        if self.k_shot is not None:
            train["k_shot"] = self.k_shot
        if train:
            values["train"] = train
        return values


class EpisodeArgs(RunArgs):
    episodes: int = Field(DEFAULT_EVAL_EPISODES, ge=1)


class CheckpointArgs(EpisodeArgs):
    checkpoint: str

    @field_validator("checkpoint")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("checkpoint path is empty")
        return value


# =============================================================================
# RUN CONTEXT
# =============================================================================


@dataclass
class RunContext:
    command: str
    args: RunArgs
    config: ExperimentConfig
    storage: StorageBackend
    started: float = field(default_factory=time.perf_counter)
    outputs: list[str] = field(default_factory=list)
    checkpoint_manifest: dict | None = None

    @property
    def seed(self) -> int:
        return self.config.train.seed

    def write_manifest(self, **extra) -> str:
        """Everything needed to re-run this command bit-identically."""
        manifest = {
            "command": self.command,
            "seed": self.seed,
            "config_hash": config_hash(self.config),
            "config": self.config.model_dump(mode="json"),
            "args": self.args.model_dump(mode="json"),
            "outputs": self.outputs,
            **extra,
        }
        if self.checkpoint_manifest is not None:
            manifest["checkpoint"] = {
                "config_hash": self.checkpoint_manifest.get("config_hash"),
                "epoch": self.checkpoint_manifest.get("epoch"),
            }
        location = self.storage.save_text(RUN_MANIFEST_PATH, json.dumps(manifest, indent=2))
        logger.info(
            "Run complete",
            extra={
                "command": self.command,
                "manifest": location,
                "duration_ms": round((time.perf_counter() - self.started) * 1000),
            },
        )
        return location

    def save_text(self, path: str, text: str) -> str:
        location = self.storage.save_text(path, text)
        self.outputs.append(path)
        return location


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_config(args: RunArgs) -> ExperimentConfig:
    """Config file plus flag overrides; a missing config file is a usage error."""
    try:
        return load_experiment_config(args.config, **args.overrides())
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e


def open_checkpoint(args: CheckpointArgs) -> tuple[AMFormer, dict, ExperimentConfig]:
    """Load a model and the run config derived from it.

    Without ``--config`` the run config is the checkpoint's own, with flags
    applied on top.

    Raises:
        UsageError: If the checkpoint does not exist
    """
    path = Path(args.checkpoint)
    settings = get_settings()
    # LocalStorage creates its root on construction.
    if settings.storage_backend == "local" and not path.is_file():
        raise UsageError(f"Checkpoint not found: {args.checkpoint}")
    storage = get_storage(path.parent, settings)
    if not storage.exists(path.name):
        raise UsageError(f"Checkpoint not found: {args.checkpoint}")
    config = resolve_config(args) if args.config else None
    model, manifest = load_checkpoint(storage, path.name, config)
    if config is None:
        config = ExperimentConfig(**_deep_merge(manifest["config"], args.overrides()))
    return model, manifest, config


def start_run(
    command: str,
    args: RunArgs,
    config: ExperimentConfig | None = None,
    checkpoint_manifest: dict | None = None,
) -> RunContext:
    """Resolve the config and open the output directory.

    Config and flag validation happen before any output is created.
    """
    if config is None:
        config = resolve_config(args)
    storage = get_storage(args.out_dir)
    logger.info(
        "Starting run",
        extra={"command": command, "seed": config.train.seed, "out_dir": args.out_dir},
    )
    return RunContext(
        command=command,
        args=args,
        config=config,
        storage=storage,
        checkpoint_manifest=checkpoint_manifest,
    )


def held_out_episodes(
    config: ExperimentConfig,
    count: int,
    phase: Phase = Phase.TEST,
    sampler: EpisodeSampler | None = None,
) -> list[Episode]:
    """Episodes fixed by the run seed; every study condition reuses them."""
    sampler = sampler or build_sampler(config, augment=False)
    rng = RngStream(config.train.seed).spawn(TEST_STREAM, 0 if phase is Phase.TEST else 1)
    return sampler.sample_many(count, config.train.k_shot, phase, rng)


def evaluated_classes(config: ExperimentConfig) -> list[int]:
    return sorted(build_sampler(config, augment=False).split.test_classes)
