"""Convolutional feature encoder and bilinear resizing helpers."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.config import EncoderConfig
from app.errors import ShapeError
from app.services.core import FeatureMap, Mask, MaskKind


class ConvStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, gn_groups: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(gn_groups, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.GroupNorm(gn_groups, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class ConvEncoder(nn.Module):
    """Stacked conv stages; the last two stage outputs are concatenated and
    projected to ``out_channels`` by a 1x1 convolution.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        in_channels = 3
        for channels, stride in zip(cfg.stage_channels, cfg.strides):
            stages.append(ConvStage(in_channels, channels, stride, cfg.gn_groups))
            in_channels = channels
        self.stages = nn.ModuleList(stages)
        self.project = nn.Conv2d(sum(cfg.stage_channels[-2:]), cfg.out_channels, 1)

    @property
    def downsample_factor(self) -> int:
        return self.cfg.downsample_factor

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """[B, 3, H, W] in [0, 1] -> [B, C, H / factor, W / factor]."""
        height, width = images.shape[-2:]
        factor = self.downsample_factor
        if height % factor or width % factor:
            raise ShapeError(f"image extent {height}x{width} not divisible by {factor}")

        x = images - 0.5
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        mid, last = outputs[-2], outputs[-1]
        if mid.shape[-2:] != last.shape[-2:]:
            mid = resize_bilinear(mid, tuple(last.shape[-2:]))
        return self.project(torch.cat([mid, last], dim=1))


def images_to_batch(images: torch.Tensor) -> torch.Tensor:
    """[H, W, 3] or [B, H, W, 3] -> [B, 3, H, W]."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected [..., H, W, 3] images, got {tuple(images.shape)}")
    return images.permute(0, 3, 1, 2).contiguous()


def extract_features(image: torch.Tensor, encoder: ConvEncoder) -> FeatureMap:
    """Encode one [H, W, 3] image into an [H/f, W/f, C] FeatureMap."""
    return FeatureMap.from_nchw(encoder(images_to_batch(image)))


def resize_bilinear(x: torch.Tensor, extent: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a [B, C, H, W] tensor; anti-aliased when shrinking."""
    if tuple(x.shape[-2:]) == tuple(extent):
        return x
    shrinking = extent[0] < x.shape[-2] or extent[1] < x.shape[-1]
    return F.interpolate(x, size=extent, mode="bilinear", align_corners=False, antialias=shrinking)


def downsample_mask(mask: Mask, target_extent: tuple[int, int]) -> Mask:
    """Bilinearly shrink a mask; binary inputs become soft masks in [0, 1].

    Raises:
        ShapeError: If the target extent is zero or larger than the source
    """
    height, width = target_extent
    if height < 1 or width < 1:
        raise ShapeError(f"target extent must be positive, got {target_extent}")
    if height > mask.extent[0] or width > mask.extent[1]:
        raise ShapeError(f"cannot downsample {mask.extent} to larger {target_extent}")
    resized = resize_bilinear(mask.to_batched(), (height, width))[0, 0]
    return Mask(resized.clamp(0.0, 1.0), MaskKind.SOFT)


def downsample_masks(masks: torch.Tensor, extent: tuple[int, int]) -> torch.Tensor:
    """Batched variant for [B, H, W] masks used inside the model."""
    return resize_bilinear(masks.unsqueeze(1), extent).squeeze(1).clamp(0.0, 1.0)
