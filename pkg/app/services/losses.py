"""Loss terms of the alternating generator/discriminator optimisation."""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from app.constants import BINARIZE_THRESHOLD, PROB_EPS
from app.services.backbone import downsample_masks, resize_bilinear
from app.services.detail_miner import (
    DetailMiner,
    FeatureOrigin,
    diversity_loss,
    score_real_fake,
    select_most_different_pair,
)
from app.services.object_miner import PyramidState


@dataclass
class LossReport:
    """Scalar loss terms of one training step."""

    l_g_total: float = 0.0
    bce: float = 0.0
    kl: float = 0.0
    adv_g: float = 0.0
    l_d_total: float = 0.0
    adv_d_real: float = 0.0
    adv_d_fake: float = 0.0
    l_div: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(torch.isfinite(torch.tensor(v)) for v in asdict(self).values())

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        keys = asdict(reports[0]).keys()
        return cls(**{k: sum(getattr(r, k) for r in reports) / len(reports) for k in keys})


@dataclass
class ForwardState:
    """Tensors shared by the two losses of one batch."""

    query_feats: torch.Tensor  # [B, C, h, w]
    logits: torch.Tensor  # [B, h, w]
    gt_feat: torch.Tensor  # [B, h, w] binary
    pyramid: PyramidState

    @property
    def fake_mask(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


def feature_ground_truth(query_masks: torch.Tensor, extent: tuple[int, int]) -> torch.Tensor:
    """Bilinearly shrink [B, H, W] ground truth and re-binarise at 0.5."""
    return (downsample_masks(query_masks, extent) >= BINARIZE_THRESHOLD).to(query_masks.dtype)


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) over the last axis; zero-probability terms of p contribute 0."""
    return (torch.xlogy(p, p) - p * torch.log(q.clamp_min(PROB_EPS))).sum(dim=-1)


def attention_mass(attn: torch.Tensor, extent: tuple[int, int]) -> torch.Tensor:
    """[B, heads, N_target, N_source] -> [B, H, W] weight received per target position."""
    return attn.mean(dim=1).sum(dim=-1).reshape(attn.shape[0], *extent)


def _as_distribution(x: torch.Tensor) -> torch.Tensor:
    flat = x.flatten(1).clamp_min(0.0)
    return flat / flat.sum(dim=1, keepdim=True).clamp_min(PROB_EPS)


def kl_distill(pyramid: PyramidState) -> torch.Tensor:
    """Sum over adjacent levels of KL(coarse || shrunk fine) between the
    attention maps; the coarse map is a fixed target. One level gives 0.
    """
    extents = pyramid.extents
    total = pyramid.query[0].new_zeros(())
    for level in range(len(extents) - 1):
        fine = attention_mass(pyramid.attention[level], extents[level])
        coarse = attention_mass(pyramid.attention[level + 1], extents[level + 1])
        fine_down = resize_bilinear(fine.unsqueeze(1), extents[level + 1])[:, 0]
        p = _as_distribution(coarse.detach())
        q = _as_distribution(fine_down)
        total = total + kl_divergence(p, q).mean()
    return total


def adversarial_d(
    real_score: torch.Tensor, fake_score: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    return -torch.log(real_score).mean(), -torch.log(1.0 - fake_score).mean()


def loss_d(
    detail: DetailMiner,
    state: ForwardState,
    lambda_div: float,
) -> tuple[torch.Tensor, LossReport]:
    """Discriminator loss on detached generator outputs.

    ``-log D(real_k) - log(1 - D(fake_k)) + lambda_div * L_div``
    """
    f_q = state.query_feats.detach()
    fake = detail.extract_local_features(f_q, state.fake_mask.detach(), FeatureOrigin.FAKE)
    real = detail.extract_local_features(f_q, state.gt_feat, FeatureOrigin.REAL)
    pair = select_most_different_pair(fake, real)
    adv_real, adv_fake = adversarial_d(
        score_real_fake(pair.real, detail), score_real_fake(pair.fake, detail)
    )
    div = diversity_loss(fake, real).mean()
    total = adv_real + adv_fake + lambda_div * div
    report = LossReport(
        l_d_total=total.detach().item(),
        adv_d_real=adv_real.detach().item(),
        adv_d_fake=adv_fake.detach().item(),
        l_div=div.detach().item(),
    )
    return total, report


def loss_g(
    detail: DetailMiner | None,
    state: ForwardState,
    lambda_kl: float,
) -> tuple[torch.Tensor, LossReport]:
    """Generator loss ``-log D(fake_k) + lambda_kl * KL + BCE``.

    Without a discriminator the adversarial term is 0. The real path only
    picks the proxy index and carries no gradient.
    """
    bce = bce_loss(state.logits, state.gt_feat)
    kl = kl_distill(state.pyramid)
    adv_g = state.logits.new_zeros(())
    if detail is not None:
        fake = detail.extract_local_features(state.query_feats, state.fake_mask, FeatureOrigin.FAKE)
        with torch.no_grad():
            real = detail.extract_local_features(
                state.query_feats, state.gt_feat, FeatureOrigin.REAL
            )
        pair = select_most_different_pair(fake, real)
        adv_g = -torch.log(score_real_fake(pair.fake, detail)).mean()
    total = adv_g + lambda_kl * kl + bce
    report = LossReport(
        l_g_total=total.detach().item(),
        bce=bce.detach().item(),
        kl=kl.detach().item(),
        adv_g=adv_g.detach().item(),
    )
    return total, report
