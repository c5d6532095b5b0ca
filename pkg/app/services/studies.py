"""Paired study protocols run against a trained model.

Every condition of a study is scored on the same episode list, so the only
difference between two rows is the condition itself.
"""

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass, field

from app.config import AggregationMode, ExperimentConfig
from app.logging_config import get_logger
from app.services.core import Episode, RngStream
from app.services.evaluation import (
    MAX_PAIRS_PER_OBJECT,
    EvaluationResult,
    evaluate,
    measure_similarity,
)
from app.services.model import AMFormer
from app.services.training import Trainer, build_model
from app.services.weak_labels import WeakLabelKind
from app.storage.base import StorageBackend
from app.utils.records import format_record

logger = get_logger("services.studies")


# =============================================================================
# TABLES
# =============================================================================


def seed_digest(seeds: Sequence[int]) -> str:
    """Short fingerprint of an episode list; equal digests mean paired rows."""
    joined = ",".join(str(s) for s in seeds)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:16]


@dataclass
class StudyTable:
    """Rows of one study, keyed by the varied condition."""

    name: str
    condition: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    episode_digest: str = ""

    def add_row(self, condition_value, result: EvaluationResult) -> dict:
        digest = seed_digest(result.episode_seeds)
        if self.episode_digest and digest != self.episode_digest:
            raise ValueError(f"{self.name}: row {condition_value} used a different episode list")
        self.episode_digest = digest
        row = {
            self.condition: condition_value,
            "miou": result.miou,
            "fb_iou": result.fb_iou,
            "episodes": result.episodes,
            "fallback_rate": result.fallback_rate,
        }
        self.rows.append(row)
        return row

    def to_text(self) -> str:
        """Fixed-width plain-text table."""
        widths = {
            c: max([len(c), *(len(_cell(r.get(c))) for r in self.rows)]) for c in self.columns
        }
        header = "  ".join(c.ljust(widths[c]) for c in self.columns)
        lines = [f"# {self.name} (episodes {self.episode_digest})", header]
        for row in self.rows:
            lines.append("  ".join(_cell(row.get(c)).ljust(widths[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_records(self) -> str:
        return "".join(format_record(row) + "\n" for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "condition": self.condition,
            "episode_digest": self.episode_digest,
            "rows": self.rows,
        }

    def write(self, storage: StorageBackend, stem: str) -> list[str]:
        """Write ``<stem>.txt``, ``<stem>.records`` and ``<stem>.json``; returns their paths."""
        outputs = {
            f"{stem}.txt": self.to_text(),
            f"{stem}.records": self.to_records(),
            f"{stem}.json": json.dumps(self.to_dict(), indent=2),
        }
        for path, text in outputs.items():
            storage.save_text(path, text)
        return list(outputs)


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.2f}" if abs(value) >= 1 else f"{value:.4f}"
    return str(value)


# =============================================================================
# STUDIES
# =============================================================================


def run_erosion_study(
    model: AMFormer,
    episodes: Sequence[Episode],
    ratios: Sequence[float],
    classes: Sequence[int] | None = None,
    workers: int = 1,
) -> StudyTable:
    """mIoU per support keep-ratio; erosion is applied at feature resolution."""
    table = StudyTable(
        name="support erosion",
        condition="keep_ratio",
        columns=["keep_ratio", "miou", "fb_iou", "episodes"],
    )
    for ratio in ratios:
        result = evaluate(model, episodes, classes, support_keep_ratio=ratio, workers=workers)
        table.add_row(float(ratio), result)
        logger.info("Erosion condition scored", extra={"keep_ratio": ratio, "miou": result.miou})
    return table


def run_weak_label_study(
    model: AMFormer,
    episodes: Sequence[Episode],
    kinds: Sequence[WeakLabelKind | str],
    classes: Sequence[int] | None = None,
    workers: int = 1,
) -> StudyTable:
    """mIoU per support label regime (mask, bbox, scribble)."""
    table = StudyTable(
        name="weak support labels",
        condition="label_kind",
        columns=["label_kind", "miou", "fb_iou", "episodes"],
    )
    for kind in kinds:
        kind = WeakLabelKind(kind)
        result = evaluate(model, episodes, classes, label_kind=kind, workers=workers)
        table.add_row(kind.value, result)
        logger.info("Label condition scored", extra={"label_kind": kind.value, "miou": result.miou})
    return table


def run_similarity_study(
    model: AMFormer,
    episodes: Sequence[Episode],
    rng: RngStream,
    pairs_per_object: int = MAX_PAIRS_PER_OBJECT,
) -> StudyTable:
    """Per-class intra- and inter-object cosine of the encoder's features."""
    report = measure_similarity(model.backbone, episodes, rng, pairs_per_object)
    table = StudyTable(
        name="feature similarity",
        condition="class_id",
        columns=["class_id", "intra_object", "inter_object", "intra_pairs", "inter_pairs"],
        rows=report.to_records(),
        episode_digest=seed_digest([e.seed for e in episodes]),
    )
    for row in table.rows:
        if row["intra_object"] <= row["inter_object"]:
            logger.warning(
                "Intra-object similarity not above inter-object",
                extra={k: row[k] for k in ("class_id", "intra_object", "inter_object")},
            )
    return table


def _train_and_score(
    table: StudyTable,
    run_config: ExperimentConfig,
    storage: StorageBackend,
    prefix: str,
    episodes: Sequence[Episode],
    classes: Sequence[int] | None,
    workers: int,
) -> dict:
    """Train one model under ``prefix`` and score it on the shared episodes."""
    trainer = Trainer(
        run_config,
        storage,
        model=build_model(run_config),
        workers=workers,
        prefix=prefix,
    )
    history = trainer.train().history
    row = {"val_miou": history[-1]["val_miou"] if history else 0.0}
    if episodes:
        result = evaluate(trainer.model, episodes, classes, workers=workers)
        digest = seed_digest(result.episode_seeds)
        if table.episode_digest and digest != table.episode_digest:
            raise ValueError(f"{table.name}: {prefix} used a different episode list")
        table.episode_digest = digest
        row.update(miou=result.miou, fb_iou=result.fb_iou, episodes=result.episodes)
    return row


def run_proxy_study(
    config: ExperimentConfig,
    proxies: Sequence[int],
    storage: StorageBackend,
    episodes: Sequence[Episode] = (),
    classes: Sequence[int] | None = None,
    workers: int = 1,
) -> StudyTable:
    """Train one model per proxy count; report final validation and test mIoU.

    Each run writes its checkpoint and history under ``proxies_<n>/``.
    """
    table = StudyTable(
        name="local proxy count",
        condition="num_proxies",
        columns=["num_proxies", "val_miou", "miou", "fb_iou", "episodes"],
    )
    for count in proxies:
        detail = config.detail.model_copy(update={"num_proxies": int(count)})
        run_config = config.model_copy(update={"detail": detail})
        row = {"num_proxies": int(count)}
        row.update(
            _train_and_score(
                table, run_config, storage, f"proxies_{count}/", episodes, classes, workers
            )
        )
        table.rows.append(row)
        logger.info("Proxy count trained", extra=row)
    return table


# =============================================================================
# COMPONENT ABLATION
# =============================================================================


@dataclass(frozen=True)
class AblationVariant:
    """One row of the component ablation.

    ``num_scales=None`` keeps the configured pyramid depth and
    ``lambda_div=None`` keeps the configured diversity weight.
    """

    name: str
    aggregation: AggregationMode
    num_scales: int | None
    detail_miner: bool
    lambda_div: float | None = None

    def apply(self, config: ExperimentConfig) -> ExperimentConfig:
        miner = config.miner.model_copy(
            update={
                "aggregation": self.aggregation,
                "num_scales": self.num_scales or config.miner.num_scales,
            }
        )
        lambda_div = config.train.lambda_div if self.lambda_div is None else self.lambda_div
        train = config.train.model_copy(
            update={"use_detail_miner": self.detail_miner, "lambda_div": lambda_div}
        )
        return config.model_copy(update={"miner": miner, "train": train})


# Support-centric baseline, then the query-centric generator grown one component at a time.
ABLATION_VARIANTS = (
    AblationVariant("baseline", AggregationMode.SUPPORT_CENTRIC, 1, detail_miner=False),
    AblationVariant("om_single_scale", AggregationMode.QUERY_CENTRIC, 1, detail_miner=False),
    AblationVariant("om_multi_scale", AggregationMode.QUERY_CENTRIC, None, detail_miner=False),
    AblationVariant(
        "om_multi_scale_dm", AggregationMode.QUERY_CENTRIC, None, detail_miner=True, lambda_div=0.0
    ),
    AblationVariant(
        "om_multi_scale_dm_div", AggregationMode.QUERY_CENTRIC, None, detail_miner=True
    ),
)


def ablation_variant(name: str) -> AblationVariant:
    for variant in ABLATION_VARIANTS:
        if variant.name == name:
            return variant
    known = ", ".join(v.name for v in ABLATION_VARIANTS)
    raise ValueError(f"unknown ablation variant {name!r}; expected one of {known}")


def run_ablation_study(
    config: ExperimentConfig,
    storage: StorageBackend,
    episodes: Sequence[Episode] = (),
    classes: Sequence[int] | None = None,
    workers: int = 1,
    variants: Sequence[AblationVariant] = ABLATION_VARIANTS,
) -> StudyTable:
    """Train one model per component variant and score all of them on the
    same episodes. ``delta`` is each row's mIoU gain over the first row.

    Each run writes its checkpoint and history under ``ablation_<name>/``.
    """
    table = StudyTable(
        name="component ablation",
        condition="variant",
        columns=[
            "variant",
            "aggregation",
            "num_scales",
            "detail_miner",
            "lambda_div",
            "val_miou",
            "miou",
            "delta",
            "fb_iou",
            "episodes",
        ],
    )
    for variant in variants:
        run_config = variant.apply(config)
        train = run_config.train
        row = {
            "variant": variant.name,
            "aggregation": variant.aggregation.value,
            "num_scales": run_config.miner.num_scales,
            "detail_miner": train.use_detail_miner,
            "lambda_div": train.lambda_div if train.use_detail_miner else None,
        }
        row.update(
            _train_and_score(
                table, run_config, storage, f"ablation_{variant.name}/", episodes, classes, workers
            )
        )
        if "miou" in row:
            row["delta"] = row["miou"] - (table.rows[0]["miou"] if table.rows else row["miou"])
        table.rows.append(row)
        logger.info("Ablation variant trained", extra=row)
    return table
