"""train, study-proxies and study-ablation."""

from pydantic import Field, field_validator

from app.commands.base import (
    EpisodeArgs,
    RunArgs,
    evaluated_classes,
    held_out_episodes,
    start_run,
)
from app.logging_config import get_logger
from app.services.studies import (
    ABLATION_VARIANTS,
    ablation_variant,
    run_ablation_study,
    run_proxy_study,
)
from app.services.training import Trainer

logger = get_logger("commands.training")


class TrainArgs(RunArgs):
    pass


class ProxyStudyArgs(EpisodeArgs):
    proxies: list[int] = Field(default_factory=lambda: [4, 6, 8, 10, 12, 14])

    @field_validator("proxies")
    @classmethod
    def _valid_counts(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("at least one proxy count is required")
        if any(count < 2 for count in value):
            raise ValueError("proxy counts must be >= 2")
        return value


class AblationStudyArgs(EpisodeArgs):
    variants: list[str] = Field(default_factory=lambda: [v.name for v in ABLATION_VARIANTS])

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, value: list[str]) -> list[str]:
        if not value:
            raise ValueError("at least one ablation variant is required")
        for name in value:
            ablation_variant(name)
        return value


def run_train(args: TrainArgs) -> dict:
    ctx = start_run("train", args)
    result = Trainer(ctx.config, ctx.storage, workers=args.workers).train()
    ctx.outputs.extend(["history.log", "checkpoint.pt", "checkpoints/"])
    summary = {"steps": result.steps, "final": result.history[-1] if result.history else {}}
    ctx.write_manifest(summary=summary)
    return summary


def run_proxy_study_command(args: ProxyStudyArgs) -> dict:
    ctx = start_run("study-proxies", args)
    episodes = held_out_episodes(ctx.config, args.episodes)
    table = run_proxy_study(
        ctx.config,
        args.proxies,
        ctx.storage,
        episodes=episodes,
        classes=evaluated_classes(ctx.config),
        workers=args.workers,
    )
    ctx.outputs.extend(table.write(ctx.storage, "study_proxies"))
    ctx.outputs.extend(f"proxies_{count}/" for count in args.proxies)
    summary = table.to_dict()
    ctx.write_manifest(summary=summary)
    return summary


def run_ablation_study_command(args: AblationStudyArgs) -> dict:
    ctx = start_run("study-ablation", args)
    episodes = held_out_episodes(ctx.config, args.episodes)
    table = run_ablation_study(
        ctx.config,
        ctx.storage,
        episodes=episodes,
        classes=evaluated_classes(ctx.config),
        workers=args.workers,
        variants=[ablation_variant(name) for name in args.variants],
    )
    ctx.outputs.extend(table.write(ctx.storage, "study_ablation"))
    ctx.outputs.extend(f"ablation_{name}/" for name in args.variants)
    summary = table.to_dict()
    ctx.write_manifest(summary=summary)
    return summary
