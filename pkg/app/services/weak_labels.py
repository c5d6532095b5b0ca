"""Weak support labels (bounding box, scribble) and support-foreground erosion."""

import math
from collections import deque
from enum import Enum

import numpy as np
import torch
from skimage.measure import label
from skimage.morphology import skeletonize

from app.errors import EmptyMaskError
from app.services.core import Mask, RngStream

SCRIBBLE_MIN_COVERAGE = 0.02
SCRIBBLE_MAX_COVERAGE = 0.10

_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


class WeakLabelKind(str, Enum):
    MASK = "mask"
    BBOX = "bbox"
    SCRIBBLE = "scribble"


def bbox_label(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    box = np.zeros_like(mask, dtype=bool)
    box[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
    return box


def scribble_length(foreground: int, skeleton_length: int) -> int:
    low = max(1, math.ceil(SCRIBBLE_MIN_COVERAGE * foreground))
    high = max(low, math.floor(SCRIBBLE_MAX_COVERAGE * foreground))
    return int(np.clip(skeleton_length, low, high))


def scribble_label(mask: np.ndarray, rng: RngStream) -> np.ndarray:
    """Connected stroke inside the largest foreground component.

    The stroke grows from a random skeleton pixel, taking skeleton pixels
    before any other foreground pixel, until it covers
    ``clip(skeleton length, 2%, 10%)`` of the foreground. Foregrounds under
    ten pixels still get a single-pixel stroke.
    """
    components = label(mask, connectivity=2)
    sizes = np.bincount(components.ravel())
    sizes[0] = 0
    component = components == int(np.argmax(sizes))

    skeleton = skeletonize(component)
    if not skeleton.any():
        skeleton = component
    target = min(scribble_length(int(mask.sum()), int(skeleton.sum())), int(component.sum()))

    skeleton_points = np.argwhere(skeleton)
    start = tuple(int(v) for v in skeleton_points[int(rng.integers(len(skeleton_points)))])

    height, width = mask.shape
    stroke = np.zeros_like(mask, dtype=bool)
    queued = np.zeros_like(mask, dtype=bool)
    on_skeleton: deque = deque([start])
    off_skeleton: deque = deque()
    queued[start] = True
    taken = 0
    while taken < target and (on_skeleton or off_skeleton):
        r, c = on_skeleton.popleft() if on_skeleton else off_skeleton.popleft()
        stroke[r, c] = True
        taken += 1
        for dr, dc in _NEIGHBOURS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < height and 0 <= nc < width and component[nr, nc] and not queued[nr, nc]:
                queued[nr, nc] = True
                (on_skeleton if skeleton[nr, nc] else off_skeleton).append((nr, nc))
    return stroke


def derive_weak_label(mask: Mask, kind: WeakLabelKind, rng: RngStream) -> Mask:
    """Replace a dense support mask with a weaker annotation of the same object.

    Raises:
        EmptyMaskError: If the mask has no foreground
    """
    if mask.foreground_count == 0:
        raise EmptyMaskError("cannot derive a weak label from an empty mask")
    kind = WeakLabelKind(kind)
    if kind is WeakLabelKind.MASK:
        return mask

    dense = mask.data.cpu().numpy() > 0
    if kind is WeakLabelKind.BBOX:
        weak = bbox_label(dense)
    else:
        weak = scribble_label(dense, rng)
    return Mask.binary(torch.from_numpy(weak.astype(np.float32)))


def erode_support_foreground(feature_mask: Mask, keep_ratio: float, rng: RngStream) -> Mask:
    """Keep a uniformly random ``ceil(keep_ratio * n)`` subset of the n
    foreground entries. Kept entries retain their value, so soft masks at
    feature resolution stay soft.

    Raises:
        ValueError: If ``keep_ratio`` is outside (0, 1]
        EmptyMaskError: If the mask has no foreground
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    flat = feature_mask.data.reshape(-1)
    positive = torch.nonzero(flat > 0).flatten()
    if positive.numel() == 0:
        raise EmptyMaskError("cannot erode an empty support foreground")

    keep = math.ceil(keep_ratio * positive.numel() - 1e-9)
    chosen = rng.choice(positive.numel(), size=keep, replace=False)
    kept = positive[torch.as_tensor(np.sort(chosen), dtype=torch.long)]
    eroded = torch.zeros_like(flat)
    eroded[kept] = flat[kept]
    return Mask(eroded.reshape(feature_mask.data.shape), feature_mask.kind)
