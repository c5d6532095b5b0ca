"""The full few-shot segmenter: encoder, seed localiser, generator and discriminator."""

from dataclasses import dataclass

import torch
import torch.nn as nn

from app.config import ExperimentConfig
from app.constants import BINARIZE_THRESHOLD
from app.errors import ShapeError
from app.services.backbone import ConvEncoder, downsample_masks, images_to_batch, resize_bilinear
from app.services.core import Episode, Mask, MaskKind, RngStream
from app.services.detail_miner import DetailMiner
from app.services.localizer import Localization, localize
from app.services.object_miner import ObjectMiner, PyramidState
from app.services.weak_labels import erode_support_foreground


@dataclass
class EpisodeBatch:
    support_images: torch.Tensor  # [B, K, H, W, 3]
    support_labels: torch.Tensor  # [B, K, H, W]
    query_images: torch.Tensor  # [B, H, W, 3]
    query_masks: torch.Tensor  # [B, H, W]
    class_ids: list[int]
    seeds: list[int]

    @classmethod
    def from_episodes(cls, episodes: list[Episode]) -> "EpisodeBatch":
        if not episodes:
            raise ShapeError("cannot batch zero episodes")
        k_shot = episodes[0].k_shot
        if any(e.k_shot != k_shot for e in episodes):
            raise ShapeError("all episodes in a batch must share k_shot")
        return cls(
            support_images=torch.stack(
                [torch.stack([s.image for s in e.supports]) for e in episodes]
            ),
            support_labels=torch.stack(
                [torch.stack([s.label.data for s in e.supports]) for e in episodes]
            ),
            query_images=torch.stack([e.query_image for e in episodes]),
            query_masks=torch.stack([e.query_mask.data for e in episodes]),
            class_ids=[e.class_id for e in episodes],
            seeds=[e.seed for e in episodes],
        )

    @property
    def size(self) -> int:
        return self.query_images.shape[0]


@dataclass
class EncodedBatch:
    support_feats: torch.Tensor  # [B, K, C, h, w]
    support_masks: torch.Tensor  # [B, K, h, w] soft
    query_feats: torch.Tensor  # [B, C, h, w]


@dataclass
class GeneratorOutput:
    localization: Localization
    logits: torch.Tensor  # [B, h, w]
    pyramid: PyramidState

    @property
    def prob(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


@dataclass
class EpisodePrediction:
    """Soft mask at feature resolution plus the image-resolution binary mask."""

    soft: Mask
    binary: Mask
    seed_activation: Mask
    soft_image: torch.Tensor
    fallback: bool
    localization: Localization
    pyramid: PyramidState


class AMFormer(nn.Module):
    """Query-centric segmenter.

    ``generate`` runs inference (localiser and generator); the discriminator is
    only used by the trainer and can be disabled with ``use_detail_miner``.
    """

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        dim = config.encoder.out_channels
        self.backbone = ConvEncoder(config.encoder)
        self.miner = ObjectMiner(config.miner, dim, config.encoder.gn_groups)
        self.detail = DetailMiner(config.detail, dim) if config.train.use_detail_miner else None
        if config.encoder.frozen:
            self.backbone.requires_grad_(False)

    def generator_parameters(self) -> list[nn.Parameter]:
        params = list(self.miner.parameters())
        if not self.config.encoder.frozen:
            params = list(self.backbone.parameters()) + params
        return params

    def discriminator_parameters(self) -> list[nn.Parameter]:
        return list(self.detail.parameters()) if self.detail is not None else []

    def encode(self, batch: EpisodeBatch) -> EncodedBatch:
        b, k = batch.support_labels.shape[:2]
        images = torch.cat(
            [
                images_to_batch(batch.support_images.flatten(0, 1)),
                images_to_batch(batch.query_images),
            ]
        )
        feats = self.backbone(images)
        extent = tuple(feats.shape[-2:])
        support_feats = feats[: b * k].reshape(b, k, *feats.shape[1:])
        support_masks = downsample_masks(batch.support_labels.flatten(0, 1), extent)
        return EncodedBatch(
            support_feats=support_feats,
            support_masks=support_masks.reshape(b, k, *extent),
            query_feats=feats[b * k :],
        )

    def generate(self, encoded: EncodedBatch) -> GeneratorOutput:
        localization = localize(
            encoded.support_feats,
            encoded.support_masks,
            encoded.query_feats,
            self.config.localizer,
        )
        logits, pyramid = self.miner(
            encoded.query_feats,
            localization.activation,
            encoded.support_feats,
            encoded.support_masks,
        )
        return GeneratorOutput(localization=localization, logits=logits, pyramid=pyramid)

    def forward(self, batch: EpisodeBatch) -> GeneratorOutput:
        return self.generate(self.encode(batch))


def erode_encoded_supports(
    encoded: EncodedBatch, keep_ratio: float, rng: RngStream
) -> EncodedBatch:
    """Randomly drop support foreground at feature resolution before pooling."""

    def erode(mask: torch.Tensor, b: int, k: int) -> torch.Tensor:
        return erode_support_foreground(Mask(mask, MaskKind.SOFT), keep_ratio, rng.spawn(b, k)).data

    eroded = torch.stack(
        [
            torch.stack([erode(m, b, k) for k, m in enumerate(per_episode)])
            for b, per_episode in enumerate(encoded.support_masks)
        ]
    )
    return EncodedBatch(encoded.support_feats, eroded, encoded.query_feats)


@torch.no_grad()
def infer(
    model: AMFormer,
    episode: Episode,
    support_keep_ratio: float = 1.0,
    rng: RngStream | None = None,
) -> EpisodePrediction:
    """Segment the query of one episode; the discriminator is never evaluated.

    Args:
        model: Trained model (switched to eval mode)
        episode: Episode to segment
        support_keep_ratio: Fraction of support foreground kept before pooling
        rng: Stream for the erosion draw (defaults to one seeded by the episode)
    """
    model.eval()
    encoded = model.encode(EpisodeBatch.from_episodes([episode]))
    if support_keep_ratio < 1.0:
        rng = rng or RngStream(episode.seed)
        encoded = erode_encoded_supports(encoded, support_keep_ratio, rng)
    out = model.generate(encoded)

    soft = out.prob[0].clamp(0.0, 1.0)
    soft_image = resize_bilinear(soft[None, None], episode.query_mask.extent)[0, 0]
    binary = (soft_image > BINARIZE_THRESHOLD).to(torch.float32)
    return EpisodePrediction(
        soft=Mask(soft, MaskKind.SOFT),
        binary=Mask(binary, MaskKind.BINARY),
        seed_activation=Mask(out.localization.activation[0], MaskKind.BINARY),
        soft_image=soft_image,
        fallback=bool(out.localization.fallback[0].any()),
        localization=out.localization,
        pyramid=out.pyramid,
    )
