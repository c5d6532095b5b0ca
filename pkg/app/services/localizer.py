"""Seed localisation: support prototype, query similarity and thresholding.

Single-map functions take the domain types; the ``*_batched`` variants and
``localize`` work on [B, ...] tensors inside the model.
"""

from dataclasses import dataclass

import torch

from app.config import LocalizerConfig, SimilarityNormalization
from app.constants import COSINE_EPS
from app.errors import EmptyMaskError, ShapeError
from app.services.core import FeatureMap, FeatureVector, Mask, MaskKind, cosine_similarity

# =============================================================================
# SINGLE-MAP OPERATIONS
# =============================================================================


def mask_average_pool(f: FeatureMap, m: Mask) -> FeatureVector:
    """Mask-weighted mean of the feature vectors.

    Raises:
        ShapeError: If extents differ
        EmptyMaskError: If the mask has no positive entry
    """
    if m.extent != (f.height, f.width):
        raise ShapeError(f"mask extent {m.extent} != feature extent {(f.height, f.width)}")
    return FeatureVector(weighted_gap(f.to_nchw(), m.data.unsqueeze(0))[0])


def similarity_map(
    f_h: FeatureVector,
    f_q: FeatureMap,
    normalization: SimilarityNormalization = SimilarityNormalization.MAX_NORMALIZE,
) -> Mask:
    if f_h.data.shape[0] != f_q.channels:
        raise ShapeError(f"prototype has {f_h.data.shape[0]} channels, features {f_q.channels}")
    raw = cosine_map(f_h.data.unsqueeze(0), f_q.to_nchw())
    return Mask(normalize_similarity(raw, normalization)[0], MaskKind.SOFT)


def threshold_activation(sim: Mask, cfg: LocalizerConfig) -> Mask:
    """Binary seed ``sim > tau``; never empty (falls back to the top-k positions)."""
    activation, _ = threshold_batched(sim.data.unsqueeze(0), cfg.tau, cfg.fallback_topk)
    return Mask(activation[0], MaskKind.BINARY)


def kshot_combine(activations: list[Mask]) -> Mask:
    """Union of the per-support activations."""
    if not activations:
        raise EmptyMaskError("kshot_combine needs at least one activation")
    extent = activations[0].extent
    if any(a.extent != extent for a in activations):
        raise ShapeError("activations must share one extent")
    combined = torch.stack([a.data for a in activations]).amax(dim=0)
    return Mask(combined, MaskKind.BINARY)


def build_pseudo_support(f_q: FeatureMap, m_qt: Mask) -> FeatureMap:
    if m_qt.extent != (f_q.height, f_q.width):
        raise ShapeError("pseudo-support mask extent differs from the query features")
    return FeatureMap(f_q.data * m_qt.data.unsqueeze(-1))


# =============================================================================
# BATCHED OPERATIONS
# =============================================================================


def weighted_gap(feats: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """[B, C, H, W] features, [B, H, W] weights -> [B, C] prototypes."""
    area = masks.sum(dim=(-2, -1))
    if (area <= 0).any():
        raise EmptyMaskError("mask average pooling over an empty mask")
    pooled = (feats * masks.unsqueeze(1)).sum(dim=(-2, -1))
    return pooled / area.unsqueeze(1)


def cosine_map(prototypes: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """[B, C] prototypes against [B, C, H, W] features -> [B, H, W] cosines."""
    return cosine_similarity(prototypes[:, :, None, None], feats, dim=1)


def normalize_similarity(raw: torch.Tensor, mode: SimilarityNormalization) -> torch.Tensor:
    """Map [B, H, W] cosines into [0, 1].

    ``max_normalize`` rectifies negative cosines and divides by the per-map
    maximum, so the best match scores 1 and orthogonal or opposed positions
    score 0. A map with no positive cosine stays all zero.
    ``softmax_spatial`` is a softmax over all positions.
    """
    mode = SimilarityNormalization(mode)
    if mode is SimilarityNormalization.SOFTMAX_SPATIAL:
        return raw.flatten(1).softmax(dim=1).reshape(raw.shape)
    rectified = raw.clamp_min(0.0)
    peak = rectified.flatten(1).amax(dim=1)[:, None, None]
    return torch.where(
        peak > COSINE_EPS,
        rectified / peak.clamp_min(COSINE_EPS),
        torch.zeros_like(rectified),
    ).clamp(0.0, 1.0)


def threshold_batched(
    sim: torch.Tensor, tau: float, topk: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """[B, H, W] similarities -> binary seeds and a per-map fallback flag.

    Empty seeds are replaced by the ``topk`` highest positions; a stable
    descending sort breaks ties in row-major order.
    """
    activation = (sim > tau).to(sim.dtype)
    empty = activation.flatten(1).sum(dim=1) == 0
    if empty.any():
        flat = activation.flatten(1).clone()
        k = min(topk, flat.shape[1])
        order = torch.sort(sim.flatten(1), dim=1, descending=True, stable=True).indices[:, :k]
        for b in torch.nonzero(empty).flatten().tolist():
            flat[b, order[b]] = 1.0
        activation = flat.reshape(sim.shape)
    return activation, empty


@dataclass
class Localization:
    """Seed localisation of a batch; per-support tensors are [B, K, ...]."""

    activation: torch.Tensor  # [B, H, W] union over supports
    per_support: torch.Tensor  # [B, K, H, W]
    raw_similarity: torch.Tensor  # [B, K, H, W]
    similarity: torch.Tensor  # [B, K, H, W]
    fallback: torch.Tensor  # [B, K] bool
    prototypes: torch.Tensor  # [B, K, C]


def localize(
    support_feats: torch.Tensor,
    support_masks: torch.Tensor,
    query_feats: torch.Tensor,
    cfg: LocalizerConfig,
) -> Localization:
    """Seed activation of each query from its K supports.

    Args:
        support_feats: [B, K, C, H, W]
        support_masks: [B, K, H, W] feature-resolution support labels
        query_feats: [B, C, H, W]
    """
    batch, k_shot = support_feats.shape[:2]
    extent = query_feats.shape[-2:]
    prototypes = weighted_gap(support_feats.flatten(0, 1), support_masks.flatten(0, 1))
    prototypes = prototypes.reshape(batch, k_shot, -1)

    query = query_feats.unsqueeze(1).expand(-1, k_shot, -1, -1, -1).flatten(0, 1)
    raw = cosine_map(prototypes.flatten(0, 1), query)
    sim = normalize_similarity(raw, cfg.normalization)
    per_support, fallback = threshold_batched(sim, cfg.tau, cfg.fallback_topk)

    per_support = per_support.reshape(batch, k_shot, *extent)
    return Localization(
        activation=per_support.amax(dim=1),
        per_support=per_support,
        raw_similarity=raw.reshape(batch, k_shot, *extent),
        similarity=sim.reshape(batch, k_shot, *extent),
        fallback=fallback.reshape(batch, k_shot),
        prototypes=prototypes,
    )
