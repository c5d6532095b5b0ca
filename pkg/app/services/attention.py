"""Feature aggregation attention: target tokens gather from source tokens.

A layer computes ``S = softmax(Q K^T / sqrt(d))`` with ``Q`` from the
target and ``K, V`` from the source, adds ``S V`` to the target and applies
a residual feed-forward block. Softmax runs over source positions (standard
cross/self attention) or over target positions, where each source token
distributes its weight across the target.

The source stream is not normalised and the projections carry no bias, so
an all-zero source contributes exactly nothing to the target.
"""

import math
from enum import Enum

import torch
import torch.nn as nn
from einops import rearrange

from app.errors import ShapeError


class SoftmaxAxis(str, Enum):
    OVER_SOURCE = "over_source"
    OVER_TARGET = "over_target"


class FeatAggLayer(nn.Module):
    """One multi-head aggregation layer (pre-norm on target and FFN inputs).

    Args:
        dim: Token dimension C
        heads: Number of heads; must divide ``dim``
        ffn_ratio: Hidden width of the feed-forward block as a multiple of C
        axis: Default softmax axis
        prenorm: Apply LayerNorm before attention and FFN
    """

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        ffn_ratio: int = 2,
        axis: SoftmaxAxis = SoftmaxAxis.OVER_SOURCE,
        prenorm: bool = True,
    ):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"heads={heads} does not divide dim={dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.axis = SoftmaxAxis(axis)

        self.norm_target = nn.LayerNorm(dim) if prenorm else nn.Identity()
        self.norm_ffn = nn.LayerNorm(dim) if prenorm else nn.Identity()
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.ffn = nn.Sequential(
            nn.Linear(dim, dim * ffn_ratio),
            nn.GELU(),
            nn.Linear(dim * ffn_ratio, dim),
        )

    def forward(
        self,
        target: torch.Tensor,
        source: torch.Tensor,
        axis: SoftmaxAxis | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Aggregate ``source`` [B, N1, C] into ``target`` [B, N2, C].

        Returns:
            Updated target [B, N2, C] and attention weights [B, heads, N2, N1]
        """
        if target.shape[1] == 0 or source.shape[1] == 0:
            raise ShapeError(
                f"attention needs non-empty sequences, got target={target.shape[1]} "
                f"source={source.shape[1]}"
            )
        if target.shape[-1] != self.dim or source.shape[-1] != self.dim:
            raise ShapeError(f"token dim must be {self.dim}")
        axis = SoftmaxAxis(axis or self.axis)

        q = rearrange(self.to_q(self.norm_target(target)), "b n (h d) -> b h n d", h=self.heads)
        k = rearrange(self.to_k(source), "b n (h d) -> b h n d", h=self.heads)
        v = rearrange(self.to_v(source), "b n (h d) -> b h n d", h=self.heads)

        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = logits.softmax(dim=-1 if axis is SoftmaxAxis.OVER_SOURCE else -2)
        aggregated = rearrange(attn @ v, "b h n d -> b n (h d)")

        x = target + aggregated
        x = x + self.ffn(self.norm_ffn(x))
        return x, attn


class FeatAggStack(nn.Module):
    """Layers applied in sequence against a fixed source."""

    def __init__(
        self,
        depth: int,
        dim: int,
        heads: int = 4,
        ffn_ratio: int = 2,
        axis: SoftmaxAxis = SoftmaxAxis.OVER_SOURCE,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            FeatAggLayer(dim, heads, ffn_ratio, axis) for _ in range(depth)
        )

    def forward(
        self, target: torch.Tensor, source: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attn = None
        for layer in self.layers:
            target, attn = layer(target, source)
        return target, attn


def feat_agg(
    target: torch.Tensor,
    source: torch.Tensor,
    layer: FeatAggLayer,
    axis: SoftmaxAxis | None = None,
) -> torch.Tensor:
    """Unbatched aggregation: [N2, C] target, [N1, C] source -> [N2, C]."""
    if target.dim() != 2 or source.dim() != 2:
        raise ShapeError("feat_agg expects [N, C] sequences")
    out, _ = layer(target.unsqueeze(0), source.unsqueeze(0), axis)
    return out[0]


def self_attention(seq: torch.Tensor, layer: FeatAggLayer) -> torch.Tensor:
    return feat_agg(seq, seq, layer, SoftmaxAxis.OVER_SOURCE)
