"""Object mining generator: expands a seed activation into a full object mask.

Query features are organised into a pyramid, every level aggregates its own
pseudo support (query features gated by the seed) with softmax over query
positions, and the aggregated levels are fused top-down before a small conv
head predicts the mask at feature resolution.

The support-centric baseline swaps the pseudo support for the masked support
features: query tokens first attend to each other, then gather from support
tokens with softmax over support positions.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
from einops import rearrange

from app.config import AggregationMode, MinerConfig
from app.errors import ShapeError
from app.services.attention import FeatAggLayer, FeatAggStack, SoftmaxAxis
from app.services.backbone import downsample_masks, resize_bilinear
from app.services.core import flatten_nchw, unflatten_nchw


@dataclass
class PyramidState:
    """Per-level tensors of one generator pass, finest level first."""

    query: list[torch.Tensor] = field(default_factory=list)
    pseudo_support: list[torch.Tensor] = field(default_factory=list)
    aggregated: list[torch.Tensor] = field(default_factory=list)
    fused: torch.Tensor | None = None
    # [B, heads, N_target, N_source] per level, kept for distillation
    attention: list[torch.Tensor] = field(default_factory=list)
    # [B, N_source] foreground weight of each source token per level
    source_mask: list[torch.Tensor] = field(default_factory=list)

    @property
    def extents(self) -> list[tuple[int, int]]:
        return [tuple(q.shape[-2:]) for q in self.query]


def support_tokens(
    support_feats: torch.Tensor,
    support_masks: torch.Tensor,
    extent: tuple[int, int],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked support features of all K shots as one token sequence.

    Args:
        support_feats: [B, K, C, h, w]
        support_masks: [B, K, h, w] soft masks
        extent: Level extent the supports are resized to

    Returns:
        Tokens [B, K*H*W, C] and their mask weights [B, K*H*W]
    """
    if support_feats.shape[:2] != support_masks.shape[:2]:
        raise ShapeError(
            f"support features {tuple(support_feats.shape)} vs masks {tuple(support_masks.shape)}"
        )
    b = support_feats.shape[0]
    feats = resize_bilinear(support_feats.flatten(0, 1), extent)
    masks = downsample_masks(support_masks.flatten(0, 1), extent)
    tokens = rearrange(feats * masks.unsqueeze(1), "(b k) c h w -> b (k h w) c", b=b)
    return tokens, rearrange(masks, "(b k) h w -> b (k h w)", b=b)


class ObjectMiner(nn.Module):
    def __init__(self, cfg: MinerConfig, dim: int, gn_groups: int = 4):
        super().__init__()
        self.cfg = cfg
        self.num_scales = cfg.num_scales
        self.aggregation = AggregationMode(cfg.aggregation)
        levels = cfg.num_scales - 1
        support_centric = self.aggregation is AggregationMode.SUPPORT_CENTRIC

        # Pyramid construction: self-attention then stride-2 conv per step.
        self.self_attn = nn.ModuleList(
            FeatAggLayer(dim, cfg.heads, cfg.ffn_ratio, SoftmaxAxis.OVER_SOURCE)
            for _ in range(levels)
        )
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(dim, dim, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(gn_groups, dim),
                nn.ReLU(inplace=True),
            )
            for _ in range(levels)
        )
        axis = SoftmaxAxis.OVER_SOURCE if support_centric else SoftmaxAxis.OVER_TARGET
        self.aggregate = nn.ModuleList(
            FeatAggStack(cfg.attn_layers_per_scale, dim, cfg.heads, cfg.ffn_ratio, axis)
            for _ in range(cfg.num_scales)
        )
        self.query_self_attn = nn.ModuleList(
            FeatAggLayer(dim, cfg.heads, cfg.ffn_ratio, SoftmaxAxis.OVER_SOURCE)
            for _ in range(cfg.num_scales if support_centric else 0)
        )
        # Bias-free so a zero coarse level contributes exactly nothing.
        self.lateral = nn.ModuleList(nn.Conv2d(dim, dim, 1, bias=False) for _ in range(levels))
        self.smooth = nn.ModuleList(
            nn.Conv2d(dim, dim, 3, padding=1, bias=False) for _ in range(levels)
        )
        self.head = nn.Sequential(
            nn.Conv2d(dim, dim // 2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim // 2, 1, 3, padding=1),
        )

    def build_pyramid(self, f_q: torch.Tensor) -> list[torch.Tensor]:
        """[B, C, H, W] -> levels with extents H / 2^l, finest first."""
        height, width = f_q.shape[-2:]
        factor = 2 ** (self.num_scales - 1)
        if height % factor or width % factor:
            raise ShapeError(f"feature extent {height}x{width} not divisible by {factor}")

        levels = [f_q]
        for attn, down in zip(self.self_attn, self.down):
            x = levels[-1]
            h, w = x.shape[-2:]
            tokens = flatten_nchw(x)
            tokens, _ = attn(tokens, tokens)
            levels.append(down(unflatten_nchw(tokens, h, w)))
        return levels

    def aggregate_scale(
        self,
        level: int,
        f_q_l: torch.Tensor,
        f_psd_l: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Query tokens gather from the pseudo support of the same level.

        Returns:
            Aggregated features [B, C, H, W] and the last layer's attention
        """
        if f_q_l.shape != f_psd_l.shape:
            raise ShapeError(
                f"query {tuple(f_q_l.shape)} vs pseudo support {tuple(f_psd_l.shape)}"
            )
        h, w = f_q_l.shape[-2:]
        tokens, attn = self.aggregate[level](flatten_nchw(f_q_l), flatten_nchw(f_psd_l))
        return unflatten_nchw(tokens, h, w), attn

    def aggregate_support(
        self,
        level: int,
        f_q_l: torch.Tensor,
        tokens: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Baseline aggregation: query self-attention, then query tokens gather
        from support tokens [B, N_s, C] with softmax over support positions.
        """
        if tokens.shape[-1] != f_q_l.shape[1]:
            raise ShapeError(f"support tokens of dim {tokens.shape[-1]} vs query {f_q_l.shape[1]}")
        h, w = f_q_l.shape[-2:]
        query = flatten_nchw(f_q_l)
        query, _ = self.query_self_attn[level](query, query)
        query, attn = self.aggregate[level](query, tokens)
        return unflatten_nchw(query, h, w), attn

    def first_layer_attention(
        self, level: int, f_q_l: torch.Tensor, source: torch.Tensor
    ) -> torch.Tensor:
        """[B, heads, N_q, N_s] attention of the level's first aggregation layer
        from query tokens over any source sequence [B, N_s, C].
        """
        _, attn = self.aggregate[level].layers[0](flatten_nchw(f_q_l), source)
        return attn

    def fuse_topdown(self, aggregated: list[torch.Tensor]) -> torch.Tensor:
        """Fuse levels (finest first) coarse to fine:
        ``x_l = smooth(lateral(a_l + up(x_{l+1})) + up(x_{l+1}))``.
        """
        if len(aggregated) != self.num_scales:
            raise ShapeError(f"expected {self.num_scales} levels, got {len(aggregated)}")
        fused = aggregated[-1]
        for level in range(self.num_scales - 2, -1, -1):
            fine = aggregated[level]
            h, w = fine.shape[-2:]
            if (2 * fused.shape[-2], 2 * fused.shape[-1]) != (h, w):
                raise ShapeError(f"level {level} extent {(h, w)} is not twice the coarser level")
            up = resize_bilinear(fused, (h, w))
            fused = self.smooth[level](self.lateral[level](fine + up) + up)
        return fused

    def predict_logits(self, fused: torch.Tensor) -> torch.Tensor:
        """[B, C, H, W] -> [B, H, W] mask logits."""
        return self.head(fused)[:, 0]

    def forward(
        self,
        f_q: torch.Tensor,
        seed: torch.Tensor,
        support_feats: torch.Tensor | None = None,
        support_masks: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, PyramidState]:
        """Expand the seed activation [B, H, W] over the query features [B, C, H, W].

        The support-centric baseline also needs ``support_feats`` [B, K, C, h, w]
        and ``support_masks`` [B, K, h, w].

        Returns:
            Mask logits [B, H, W] and the pyramid state
        """
        support_centric = self.aggregation is AggregationMode.SUPPORT_CENTRIC
        if support_centric and (support_feats is None or support_masks is None):
            raise ShapeError("support-centric aggregation needs support features and masks")

        state = PyramidState()
        for level, f_q_l in enumerate(self.build_pyramid(f_q)):
            extent = tuple(f_q_l.shape[-2:])
            m_l = downsample_masks(seed, extent)
            f_psd_l = f_q_l * m_l.unsqueeze(1)
            if support_centric:
                tokens, source_mask = support_tokens(support_feats, support_masks, extent)
                aggregated, attn = self.aggregate_support(level, f_q_l, tokens)
            else:
                source_mask = m_l.flatten(1)
                aggregated, attn = self.aggregate_scale(level, f_q_l, f_psd_l)
            state.source_mask.append(source_mask)
            state.query.append(f_q_l)
            state.pseudo_support.append(f_psd_l)
            state.aggregated.append(aggregated)
            state.attention.append(attn)
        state.fused = self.fuse_topdown(state.aggregated)
        return self.predict_logits(state.fused), state


def predict_mask(miner: ObjectMiner, fused: torch.Tensor) -> torch.Tensor:
    """Soft mask in [0, 1]; never binarised here."""
    return torch.sigmoid(miner.predict_logits(fused))
