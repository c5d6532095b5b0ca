"""Evaluation service for few-shot segmentation episodes.

Scores binarised predictions against query ground truth with the standard
protocol:
- mIoU: per-class IoU (intersection and union summed over the episodes of a
  class), averaged over the evaluated classes
- FB-IoU: mean of foreground and background IoU, accumulated over all episodes

Also measures intra- and inter-object feature similarity on the encoder's
mid-level features.
"""

import copy
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch

from app.constants import BINARIZE_THRESHOLD
from app.errors import ShapeError
from app.logging_config import get_logger
from app.services.backbone import ConvEncoder, downsample_masks, images_to_batch
from app.services.core import Episode, Mask, RngStream, SupportSample, safe_normalize
from app.services.model import AMFormer, infer
from app.services.weak_labels import WeakLabelKind, derive_weak_label

logger = get_logger("services.evaluation")


# =============================================================================
# CONSTANTS
# =============================================================================

MAX_PAIRS_PER_OBJECT = 2000

# Stream keys spawned from an episode seed.
WEAK_LABEL_STREAM = 1
EROSION_STREAM = 2


# =============================================================================
# DATA CLASSES
# =============================================================================


@dataclass
class IoUAccumulator:
    """Pixel counts accumulated over episodes; merge is associative."""

    intersection: dict[int, int] = field(default_factory=dict)
    union: dict[int, int] = field(default_factory=dict)
    fg_intersection: int = 0
    fg_union: int = 0
    bg_intersection: int = 0
    bg_union: int = 0
    episodes: int = 0

    def update(self, pred: Mask, gt: Mask, class_id: int) -> None:
        if pred.extent != gt.extent:
            raise ShapeError(f"prediction extent {pred.extent} != ground truth {gt.extent}")
        p = pred.data > 0
        g = gt.data > 0
        inter = int((p & g).sum())
        union = int((p | g).sum())
        self.intersection[class_id] = self.intersection.get(class_id, 0) + inter
        self.union[class_id] = self.union.get(class_id, 0) + union
        self.fg_intersection += inter
        self.fg_union += union
        self.bg_intersection += int((~p & ~g).sum())
        self.bg_union += int((~p | ~g).sum())
        self.episodes += 1

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        merged = copy.deepcopy(self)
        for class_id, value in other.intersection.items():
            merged.intersection[class_id] = merged.intersection.get(class_id, 0) + value
        for class_id, value in other.union.items():
            merged.union[class_id] = merged.union.get(class_id, 0) + value
        merged.fg_intersection += other.fg_intersection
        merged.fg_union += other.fg_union
        merged.bg_intersection += other.bg_intersection
        merged.bg_union += other.bg_union
        merged.episodes += other.episodes
        return merged

    def class_iou(self, class_id: int) -> float:
        union = self.union.get(class_id, 0)
        return self.intersection.get(class_id, 0) / union if union else 0.0

    def miou(self, classes: Sequence[int] | None = None) -> float:
        """Mean class IoU x 100 over ``classes`` that were evaluated."""
        candidates = classes if classes is not None else self.union
        evaluated = [c for c in candidates if self.union.get(c)]
        if not evaluated:
            return 0.0
        return 100.0 * sum(self.class_iou(c) for c in evaluated) / len(evaluated)

    def fb_iou(self) -> float:
        fg = self.fg_intersection / self.fg_union if self.fg_union else 0.0
        bg = self.bg_intersection / self.bg_union if self.bg_union else 0.0
        return 100.0 * (fg + bg) / 2


def accumulate_iou(acc: IoUAccumulator, pred: Mask, gt: Mask, class_id: int) -> IoUAccumulator:
    """Return a new accumulator with one more episode counted."""
    updated = copy.deepcopy(acc)
    updated.update(pred, gt, class_id)
    return updated


@dataclass
class EvaluationResult:
    miou: float
    fb_iou: float
    per_class: dict[int, float]
    episodes: int
    episode_seeds: list[int]
    fallback_rate: float

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "fb_iou": self.fb_iou,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "episodes": self.episodes,
            "fallback_rate": self.fallback_rate,
        }


@dataclass
class ClassSimilarity:
    intra_sum: float = 0.0
    intra_pairs: int = 0
    inter_sum: float = 0.0
    inter_pairs: int = 0

    @property
    def intra_object(self) -> float:
        return self.intra_sum / self.intra_pairs if self.intra_pairs else float("nan")

    @property
    def inter_object(self) -> float:
        return self.inter_sum / self.inter_pairs if self.inter_pairs else float("nan")


@dataclass
class SimilarityReport:
    per_class: dict[int, ClassSimilarity] = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        return [
            {
                "class_id": class_id,
                "intra_object": stats.intra_object,
                "inter_object": stats.inter_object,
                "intra_pairs": stats.intra_pairs,
                "inter_pairs": stats.inter_pairs,
            }
            for class_id, stats in sorted(self.per_class.items())
            if stats.intra_pairs and stats.inter_pairs
        ]


# =============================================================================
# EVALUATION SERVICE
# =============================================================================


def with_weak_supports(episode: Episode, kind: WeakLabelKind) -> Episode:
    """Copy of ``episode`` whose support labels are replaced by weak labels."""
    kind = WeakLabelKind(kind)
    if kind is WeakLabelKind.MASK:
        return episode
    rng = RngStream(episode.seed).spawn(WEAK_LABEL_STREAM)
    supports = tuple(
        SupportSample(
            image=s.image,
            label=derive_weak_label(s.label, kind, rng.spawn(k)),
            scene_id=s.scene_id,
        )
        for k, s in enumerate(episode.supports)
    )
    return Episode(
        supports=supports,
        query_image=episode.query_image,
        query_mask=episode.query_mask,
        class_id=episode.class_id,
        episode_id=episode.episode_id,
        query_id=episode.query_id,
        seed=episode.seed,
    )


def _score_episode(
    model: AMFormer,
    episode: Episode,
    label_kind: WeakLabelKind,
    support_keep_ratio: float,
) -> tuple[IoUAccumulator, bool]:
    episode = with_weak_supports(episode, label_kind)
    rng = RngStream(episode.seed).spawn(EROSION_STREAM)
    prediction = infer(model, episode, support_keep_ratio, rng)
    acc = IoUAccumulator()
    acc.update(prediction.binary, episode.query_mask, episode.class_id)
    return acc, prediction.fallback


def evaluate(
    model: AMFormer,
    episodes: Sequence[Episode],
    classes: Sequence[int] | None = None,
    label_kind: WeakLabelKind = WeakLabelKind.MASK,
    support_keep_ratio: float = 1.0,
    workers: int = 1,
) -> EvaluationResult:
    """Score the model on a fixed episode list.

    Every random draw (weak labels, erosion) is seeded by the episode itself,
    so conditions evaluated on the same list form a paired comparison.

    Args:
        model: Model to evaluate
        episodes: Episodes to segment
        classes: Classes averaged into mIoU (default: all evaluated classes)
        label_kind: Support label regime
        support_keep_ratio: Fraction of support foreground kept before pooling
        workers: Threads used for episode inference
    """
    model.eval()

    def score(episode: Episode) -> tuple[IoUAccumulator, bool]:
        return _score_episode(model, episode, label_kind, support_keep_ratio)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, episodes))
    else:
        scored = [score(e) for e in episodes]

    acc = IoUAccumulator()
    for partial, _ in scored:
        acc = acc.merge(partial)
    fallbacks = sum(1 for _, fell_back in scored if fell_back)

    evaluated = sorted(classes if classes is not None else acc.union)
    result = EvaluationResult(
        miou=acc.miou(evaluated),
        fb_iou=acc.fb_iou(),
        per_class={c: 100.0 * acc.class_iou(c) for c in evaluated if acc.union.get(c)},
        episodes=acc.episodes,
        episode_seeds=[e.seed for e in episodes],
        fallback_rate=fallbacks / len(episodes) if episodes else 0.0,
    )
    logger.info(
        "Evaluation completed",
        extra={
            "miou": round(result.miou, 2),
            "fb_iou": round(result.fb_iou, 2),
            "episodes": result.episodes,
            "label_kind": WeakLabelKind(label_kind).value,
            "keep_ratio": support_keep_ratio,
        },
    )
    return result


# =============================================================================
# FEATURE SIMILARITY
# =============================================================================


def intra_object_similarity(feats: torch.Tensor, pairs: int, rng: RngStream) -> tuple[float, int]:
    """Sum of cosines over up to ``pairs`` random distinct pixel pairs of one object.

    Args:
        feats: [n, C] features of the object's pixels

    Returns:
        (cosine sum, pair count); objects with fewer than 2 pixels give (0, 0)
    """
    n = feats.shape[0]
    if n < 2:
        return 0.0, 0
    count = min(pairs, n * (n - 1))
    first = torch.as_tensor(rng.integers(0, n, size=count))
    second = (first + torch.as_tensor(rng.integers(1, n, size=count))) % n
    normed = safe_normalize(feats)
    return float((normed[first] * normed[second]).sum()), count


def inter_object_similarity(
    feats_a: torch.Tensor, feats_b: torch.Tensor, pairs: int, rng: RngStream
) -> tuple[float, int]:
    """Sum of cosines over up to ``pairs`` random pixel pairs across two objects."""
    if feats_a.shape[0] == 0 or feats_b.shape[0] == 0:
        return 0.0, 0
    count = min(pairs, feats_a.shape[0] * feats_b.shape[0])
    first = torch.as_tensor(rng.integers(0, feats_a.shape[0], size=count))
    second = torch.as_tensor(rng.integers(0, feats_b.shape[0], size=count))
    return float((safe_normalize(feats_a)[first] * safe_normalize(feats_b)[second]).sum()), count


def _object_pixels(encoder: ConvEncoder, image: torch.Tensor, mask: Mask) -> torch.Tensor:
    feats = encoder(images_to_batch(image))[0]
    extent = tuple(feats.shape[-2:])
    inside = downsample_masks(mask.data.unsqueeze(0), extent)[0] >= BINARIZE_THRESHOLD
    return feats.permute(1, 2, 0)[inside]


@torch.no_grad()
def measure_similarity(
    encoder: ConvEncoder,
    episodes: Sequence[Episode],
    rng: RngStream,
    pairs_per_object: int = MAX_PAIRS_PER_OBJECT,
) -> SimilarityReport:
    """Intra-object (within each query object) and inter-object (first support
    object vs query object of the same class) cosine similarity per class.
    """
    encoder.eval()
    report = SimilarityReport()
    for episode in episodes:
        query = _object_pixels(encoder, episode.query_image, episode.query_mask)
        support = episode.supports[0]
        support_pixels = _object_pixels(encoder, support.image, support.label)
        stats = report.per_class.setdefault(episode.class_id, ClassSimilarity())

        total, count = intra_object_similarity(query, pairs_per_object, rng)
        stats.intra_sum += total
        stats.intra_pairs += count
        total, count = inter_object_similarity(support_pixels, query, pairs_per_object, rng)
        stats.inter_sum += total
        stats.inter_pairs += count

    logger.info("Measured feature similarity", extra={"episodes": len(episodes)})
    return report
