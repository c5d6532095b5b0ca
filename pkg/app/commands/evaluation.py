"""eval, the three evaluation studies and dump-diagnostics."""

import json

from pydantic import Field, field_validator

from app.commands.base import (
    CheckpointArgs,
    evaluated_classes,
    held_out_episodes,
    open_checkpoint,
    start_run,
)
from app.logging_config import get_logger
from app.services.core import RngStream
from app.services.diagnostics import dump_diagnostics
from app.services.episodes import Phase
from app.services.evaluation import MAX_PAIRS_PER_OBJECT, evaluate
from app.services.studies import (
    run_erosion_study,
    run_similarity_study,
    run_weak_label_study,
)
from app.services.weak_labels import WeakLabelKind
from app.utils.records import format_record

logger = get_logger("commands.evaluation")

# Stream key for similarity pair sampling.
SIMILARITY_STREAM = 4


# =============================================================================
# ARGUMENT RECORDS
# =============================================================================


class EvalArgs(CheckpointArgs):
    label_kind: WeakLabelKind = WeakLabelKind.MASK
    dump_diagnostics: int = Field(0, ge=0)


class ErosionStudyArgs(CheckpointArgs):
    ratios: list[float] = Field(default_factory=lambda: [0.2, 0.35, 0.5, 0.65, 0.8, 1.0])

    @field_validator("ratios")
    @classmethod
    def _valid_ratios(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("at least one keep ratio is required")
        if any(not 0.0 < ratio <= 1.0 for ratio in value):
            raise ValueError("keep ratios must lie in (0, 1]")
        return value


class WeakLabelStudyArgs(CheckpointArgs):
    label_kinds: list[WeakLabelKind] = Field(
        default_factory=lambda: [WeakLabelKind.MASK, WeakLabelKind.BBOX, WeakLabelKind.SCRIBBLE]
    )


class SimilarityStudyArgs(CheckpointArgs):
    episodes: int = Field(100, ge=1)
    pairs_per_object: int = Field(MAX_PAIRS_PER_OBJECT, ge=1)


class DiagnosticsArgs(CheckpointArgs):
    episodes: int = Field(8, ge=1)
    panels: bool = True


# =============================================================================
# HANDLERS
# =============================================================================


def run_eval(args: EvalArgs) -> dict:
    model, manifest, config = open_checkpoint(args)
    ctx = start_run("eval", args, config, manifest)
    episodes = held_out_episodes(config, args.episodes)
    result = evaluate(
        model,
        episodes,
        evaluated_classes(config),
        label_kind=args.label_kind,
        workers=args.workers,
    )
    summary = result.to_dict()
    ctx.save_text("eval.json", json.dumps(summary, indent=2))
    ctx.save_text(
        "eval.records",
        format_record({k: v for k, v in summary.items() if k != "per_class"}) + "\n",
    )
    if args.dump_diagnostics:
        dump_diagnostics(model, episodes[: args.dump_diagnostics], ctx.storage)
        ctx.outputs.append("diagnostics/")
    ctx.write_manifest(summary=summary)
    return summary


def run_erosion_study_command(args: ErosionStudyArgs) -> dict:
    model, manifest, config = open_checkpoint(args)
    ctx = start_run("study-erosion", args, config, manifest)
    episodes = held_out_episodes(config, args.episodes)
    table = run_erosion_study(
        model, episodes, args.ratios, evaluated_classes(config), workers=args.workers
    )
    ctx.outputs.extend(table.write(ctx.storage, "study_erosion"))
    ctx.write_manifest(summary=table.to_dict())
    return table.to_dict()


def run_weak_label_study_command(args: WeakLabelStudyArgs) -> dict:
    model, manifest, config = open_checkpoint(args)
    ctx = start_run("study-weak-labels", args, config, manifest)
    episodes = held_out_episodes(config, args.episodes)
    table = run_weak_label_study(
        model, episodes, args.label_kinds, evaluated_classes(config), workers=args.workers
    )
    ctx.outputs.extend(table.write(ctx.storage, "study_weak_labels"))
    ctx.write_manifest(summary=table.to_dict())
    return table.to_dict()


def run_similarity_study_command(args: SimilarityStudyArgs) -> dict:
    """Similarity over episodes of every class, training and novel alike."""
    model, manifest, config = open_checkpoint(args)
    ctx = start_run("study-similarity", args, config, manifest)
    episodes = held_out_episodes(config, args.episodes, Phase.TRAIN) + held_out_episodes(
        config, args.episodes, Phase.TEST
    )
    rng = RngStream(config.train.seed).spawn(SIMILARITY_STREAM)
    table = run_similarity_study(model, episodes, rng, args.pairs_per_object)
    ctx.outputs.extend(table.write(ctx.storage, "study_similarity"))
    ctx.write_manifest(summary=table.to_dict())
    return table.to_dict()


def run_dump_diagnostics(args: DiagnosticsArgs) -> dict:
    model, manifest, config = open_checkpoint(args)
    ctx = start_run("dump-diagnostics", args, config, manifest)
    episodes = held_out_episodes(config, args.episodes)
    written = dump_diagnostics(model, episodes, ctx.storage, panels=args.panels)
    ctx.outputs.append("diagnostics/")
    summary = {"episodes": len(episodes), "archives": len(written)}
    ctx.write_manifest(summary=summary)
    return summary
