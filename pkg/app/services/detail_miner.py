"""Detail mining discriminator.

A bank of learnable proxies attends to masked query features. The same bank
runs over the predicted ("fake") and ground-truth ("real") object; the proxy
whose two local features disagree most is scored real/fake.
"""

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from app.config import DetailConfig
from app.constants import PROB_EPS
from app.errors import ShapeError
from app.services.attention import FeatAggStack, SoftmaxAxis
from app.services.core import flatten_nchw, safe_normalize

# Cosines within this distance of the minimum count as ties.
PAIR_TIE_TOLERANCE = 1e-6


class FeatureOrigin(str, Enum):
    REAL = "real"
    FAKE = "fake"


@dataclass
class LocalFeatureSet:
    omega: torch.Tensor  # [B, N, C]
    origin: FeatureOrigin
    attention: torch.Tensor | None = None  # [B, heads, N, H*W]


@dataclass
class MostDifferentPair:
    index: torch.Tensor  # [B] long, 0-based proxy index
    fake: torch.Tensor  # [B, C]
    real: torch.Tensor  # [B, C]
    cosine: torch.Tensor  # [B]


class DetailMiner(nn.Module):
    def __init__(self, cfg: DetailConfig, dim: int):
        super().__init__()
        if cfg.num_proxies < 2:
            raise ShapeError("the proxy bank needs at least 2 proxies")
        self.cfg = cfg
        self.proxies = nn.Parameter(torch.empty(cfg.num_proxies, dim))
        nn.init.trunc_normal_(self.proxies, std=0.02)
        self.layers = FeatAggStack(
            cfg.attn_layers, dim, cfg.heads, cfg.ffn_ratio, SoftmaxAxis.OVER_SOURCE
        )
        self.head = nn.Sequential(
            nn.Linear(dim, dim // 2),
            nn.LeakyReLU(0.2),
            nn.Linear(dim // 2, 1),
        )

    @property
    def num_proxies(self) -> int:
        return self.proxies.shape[0]

    def extract_local_features(
        self,
        f_q: torch.Tensor,
        mask: torch.Tensor,
        origin: FeatureOrigin,
    ) -> LocalFeatureSet:
        """Proxies gather from ``f_q`` [B, C, H, W] gated by ``mask`` [B, H, W]."""
        if f_q.shape[-2:] != mask.shape[-2:]:
            raise ShapeError(f"mask extent {tuple(mask.shape[-2:])} != {tuple(f_q.shape[-2:])}")
        source = flatten_nchw(f_q * mask.unsqueeze(1))
        target = self.proxies.unsqueeze(0).expand(f_q.shape[0], -1, -1)
        omega, attn = self.layers(target, source)
        return LocalFeatureSet(omega=omega, origin=FeatureOrigin(origin), attention=attn)

    def score(self, omega: torch.Tensor) -> torch.Tensor:
        """[B, C] local features -> [B] real probability in [eps, 1 - eps]."""
        return torch.sigmoid(self.head(omega)[..., 0]).clamp(PROB_EPS, 1.0 - PROB_EPS)

    def proxy_attention_maps(self, f_q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Head-averaged attention of each proxy over query positions, [B, N, H, W]."""
        local = self.extract_local_features(f_q, mask, FeatureOrigin.FAKE)
        height, width = f_q.shape[-2:]
        return local.attention.mean(dim=1).reshape(f_q.shape[0], self.num_proxies, height, width)


def select_most_different_pair(fake: LocalFeatureSet, real: LocalFeatureSet) -> MostDifferentPair:
    """Proxy index with the lowest cosine between its fake and real feature.

    Ties (within ``PAIR_TIE_TOLERANCE``) go to the smallest index.
    """
    if fake.omega.shape != real.omega.shape:
        raise ShapeError("fake and real feature sets differ in shape")
    cosines = (safe_normalize(fake.omega) * safe_normalize(real.omega)).sum(dim=-1)
    with torch.no_grad():
        lowest = cosines.min(dim=1, keepdim=True).values
        index = (cosines <= lowest + PAIR_TIE_TOLERANCE).to(torch.int8).argmax(dim=1)
    rows = torch.arange(index.shape[0], device=index.device)
    return MostDifferentPair(
        index=index,
        fake=fake.omega[rows, index],
        real=real.omega[rows, index],
        cosine=cosines[rows, index],
    )


def score_real_fake(omega: torch.Tensor, miner: DetailMiner) -> torch.Tensor:
    return miner.score(omega)


def _mean_offdiagonal_cosine(omega: torch.Tensor) -> torch.Tensor:
    normed = safe_normalize(omega)
    gram = normed @ normed.transpose(-2, -1)
    n = omega.shape[-2]
    off_diagonal = gram.sum(dim=(-2, -1)) - gram.diagonal(dim1=-2, dim2=-1).sum(dim=-1)
    return off_diagonal / (n * (n - 1))


def diversity_loss(fake: LocalFeatureSet, real: LocalFeatureSet) -> torch.Tensor:
    """Mean pairwise cosine among proxies' local features, both sets summed.

    Ordered pairs ``i != j``; the value lies in [-2, 2]. Returns one value per
    batch item.
    """
    n = fake.omega.shape[-2]
    if n < 2 or real.omega.shape[-2] != n:
        raise ShapeError("diversity loss needs two sets of at least 2 proxies")
    return _mean_offdiagonal_cosine(fake.omega) + _mean_offdiagonal_cosine(real.omega)
