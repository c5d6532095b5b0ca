"""Shared semantic types and numeric conventions.

Feature maps are stored row-major as [H, W, C] and masks as [H, W]. The
neural modules work on batched channel-first tensors ([B, C, H, W]); the
``to_nchw`` / ``from_nchw`` helpers convert between the two layouts.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
import torch
from einops import rearrange

from app.constants import COSINE_EPS
from app.errors import ShapeError


class MaskKind(str, Enum):
    BINARY = "binary"
    SOFT = "soft"


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True)
class FeatureMap:
    """Dense features F with layout [H, W, C]."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise ShapeError(
                f"FeatureMap needs a non-empty [H, W, C] tensor, got {tuple(self.data.shape)}"
            )
        if not torch.isfinite(self.data).all():
            raise ValueError("FeatureMap entries must be finite")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_nchw(self) -> torch.Tensor:
        return rearrange(self.data, "h w c -> c h w").unsqueeze(0)

    @classmethod
    def from_nchw(cls, tensor: torch.Tensor) -> "FeatureMap":
        if tensor.dim() != 4 or tensor.shape[0] != 1:
            raise ShapeError(f"expected [1, C, H, W], got {tuple(tensor.shape)}")
        return cls(rearrange(tensor[0], "c h w -> h w c"))


@dataclass(frozen=True)
class Mask:
    """Binary ground-truth style mask or soft prediction in [0, 1], layout [H, W]."""

    data: torch.Tensor
    kind: MaskKind = MaskKind.BINARY

    def __post_init__(self):
        if self.data.dim() != 2 or min(self.data.shape) < 1:
            raise ShapeError(
                f"Mask needs a non-empty [H, W] tensor, got {tuple(self.data.shape)}"
            )
        if self.kind is MaskKind.BINARY:
            if not ((self.data == 0) | (self.data == 1)).all():
                raise ValueError("binary mask entries must be 0 or 1")
        elif not ((self.data >= 0) & (self.data <= 1)).all():
            raise ValueError("soft mask entries must lie in [0, 1]")

    @property
    def extent(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @property
    def foreground_count(self) -> int:
        return int((self.data > 0).sum())

    def to_batched(self) -> torch.Tensor:
        return self.data[None, None]

    @classmethod
    def binary(cls, data: torch.Tensor | np.ndarray) -> "Mask":
        return cls(torch.as_tensor(data, dtype=torch.float32), MaskKind.BINARY)

    @classmethod
    def soft(cls, data: torch.Tensor | np.ndarray) -> "Mask":
        return cls(torch.as_tensor(data, dtype=torch.float32), MaskKind.SOFT)


@dataclass(frozen=True)
class FeatureVector:
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 1:
            raise ShapeError(f"FeatureVector needs a [C] tensor, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("FeatureVector entries must be finite")


@dataclass(frozen=True)
class SupportSample:
    image: torch.Tensor  # [H_img, W_img, 3]
    label: Mask
    scene_id: str = ""


@dataclass(frozen=True)
class Episode:
    """One meta-learning task: K labelled supports and a query of the same class."""

    supports: tuple[SupportSample, ...]
    query_image: torch.Tensor
    query_mask: Mask
    class_id: int
    episode_id: int = 0
    query_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if len(self.supports) < 1:
            raise ShapeError("an episode needs at least one support")
        extent = tuple(self.query_image.shape[:2])
        if self.query_mask.extent != extent:
            raise ShapeError("query mask extent differs from the query image")
        for support in self.supports:
            if tuple(support.image.shape[:2]) != extent or support.label.extent != extent:
                raise ShapeError("supports must share the query's spatial extent")
            if support.label.foreground_count == 0:
                raise ValueError("support labels must contain foreground")

    @property
    def k_shot(self) -> int:
        return len(self.supports)

    def to_record(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "class_id": self.class_id,
            "support_ids": [s.scene_id for s in self.supports],
            "query_id": self.query_id,
            "seed": self.seed,
        }


@dataclass
class RngStream:
    """Seeded random stream; identical seeds give identical draw sequences.

    Child streams derived with ``spawn`` are independent of how many draws the
    parent has made, so paired studies can re-derive the same episodes.
    """

    seed: int
    path: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def choice(self, population, size=None, replace: bool = True):
        return self.generator.choice(population, size=size, replace=replace)

    def derive_seed(self) -> int:
        return int(self.generator.integers(0, 2**63 - 1))


# =============================================================================
# OPERATIONS
# =============================================================================


def flatten_spatial(f: FeatureMap | torch.Tensor) -> torch.Tensor:
    """[H, W, C] -> [H*W, C], row r holding position (r // W, r % W)."""
    data = f.data if isinstance(f, FeatureMap) else f
    return rearrange(data, "h w c -> (h w) c")


def unflatten_spatial(rows: torch.Tensor, height: int, width: int) -> FeatureMap:
    if rows.dim() != 2 or rows.shape[0] != height * width:
        raise ShapeError(f"cannot unflatten {tuple(rows.shape)} into {height}x{width}")
    return FeatureMap(rearrange(rows, "(h w) c -> h w c", h=height, w=width))


def flatten_nchw(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b c h w -> b (h w) c")


def unflatten_nchw(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return rearrange(x, "b (h w) c -> b c h w", h=height, w=width)


class Cosine(NamedTuple):
    value: float
    degenerate: bool


def safe_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalise along ``dim``; vectors with norm < COSINE_EPS become zero."""
    norm = x.norm(dim=dim, keepdim=True)
    return torch.where(norm < COSINE_EPS, torch.zeros_like(x), x / norm.clamp_min(COSINE_EPS))


def cosine_similarity(u: torch.Tensor, v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Broadcasting cosine similarity that scores zero-norm inputs as 0."""
    return (safe_normalize(u, dim) * safe_normalize(v, dim)).sum(dim=dim)


def cosine(u: FeatureVector, v: FeatureVector) -> Cosine:
    degenerate = bool(u.data.norm() < COSINE_EPS or v.data.norm() < COSINE_EPS)
    if degenerate:
        return Cosine(0.0, True)
    value = float(cosine_similarity(u.data, v.data).clamp(-1.0, 1.0))
    return Cosine(value, False)
