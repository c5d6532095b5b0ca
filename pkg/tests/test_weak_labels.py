"""Tests for weak support labels and support-foreground erosion."""

import math

import numpy as np
import pytest
import torch
from skimage.measure import label

from app.errors import EmptyMaskError
from app.services.core import Mask, MaskKind, RngStream
from app.services.weak_labels import (
    SCRIBBLE_MAX_COVERAGE,
    SCRIBBLE_MIN_COVERAGE,
    WeakLabelKind,
    derive_weak_label,
    erode_support_foreground,
)
from tests.conftest import square_mask


def disc_mask(size: int = 64, radius: int = 15) -> Mask:
    rows, cols = np.mgrid[:size, :size]
    inside = (rows - size / 2) ** 2 + (cols - size / 2) ** 2 <= radius**2
    return Mask.binary(inside.astype(np.float32))


# =============================================================================
# BOUNDING BOX
# =============================================================================


def test_bbox_of_single_pixel_is_that_pixel():
    mask = square_mask(10, 3, 6, 1)
    weak = derive_weak_label(mask, WeakLabelKind.BBOX, RngStream(0))
    assert torch.equal(weak.data, mask.data)


def test_bbox_of_square_is_the_square():
    mask = square_mask(10, 3, 3, 4)
    weak = derive_weak_label(mask, WeakLabelKind.BBOX, RngStream(0))
    assert torch.equal(weak.data, mask.data)


def test_bbox_fills_tight_box_of_a_disc():
    mask = disc_mask()
    weak = derive_weak_label(mask, "bbox", RngStream(0)).data.numpy() > 0
    dense = mask.data.numpy() > 0
    rows, cols = np.flatnonzero(dense.any(axis=1)), np.flatnonzero(dense.any(axis=0))
    assert weak.sum() == (rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)
    assert weak[dense].all()


# =============================================================================
# SCRIBBLE
# =============================================================================


def test_scribble_inside_small_square():
    mask = square_mask(10, 3, 3, 4)
    weak = derive_weak_label(mask, WeakLabelKind.SCRIBBLE, RngStream(4))
    stroke = weak.data > 0
    assert stroke.any()
    assert not (stroke & (mask.data == 0)).any()
    assert int(stroke.sum()) <= max(1, math.floor(SCRIBBLE_MAX_COVERAGE * 16))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scribble_is_connected_with_bounded_coverage(seed):
    mask = disc_mask()
    stroke = derive_weak_label(mask, WeakLabelKind.SCRIBBLE, RngStream(seed)).data.numpy() > 0
    foreground = int(mask.data.sum())
    assert math.ceil(SCRIBBLE_MIN_COVERAGE * foreground) <= stroke.sum()
    assert stroke.sum() <= math.floor(SCRIBBLE_MAX_COVERAGE * foreground)
    assert label(stroke, connectivity=2).max() == 1
    assert not (stroke & (mask.data.numpy() == 0)).any()


def test_mask_kind_is_identity():
    mask = disc_mask()
    assert derive_weak_label(mask, WeakLabelKind.MASK, RngStream(0)) is mask


def test_weak_label_of_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        derive_weak_label(Mask.binary(torch.zeros(8, 8)), WeakLabelKind.BBOX, RngStream(0))


# =============================================================================
# EROSION
# =============================================================================


def test_erosion_keeps_exact_count_within_original():
    mask = Mask.binary(torch.ones(10, 10))
    eroded = erode_support_foreground(mask, 0.5, RngStream(1))
    assert eroded.foreground_count == 50
    assert torch.all(eroded.data <= mask.data)


def test_full_keep_ratio_is_identity():
    mask = Mask.soft(torch.rand(6, 6))
    eroded = erode_support_foreground(mask, 1.0, RngStream(1))
    assert torch.equal(eroded.data, mask.data)


def test_erosion_preserves_soft_values():
    data = torch.zeros(4, 4)
    data[1:3, 1:3] = torch.tensor([[0.3, 0.6], [0.9, 1.0]])
    eroded = erode_support_foreground(Mask.soft(data), 0.5, RngStream(2))
    kept = eroded.data > 0
    assert int(kept.sum()) == 2
    assert torch.equal(eroded.data[kept], data[kept])
    assert eroded.kind is MaskKind.SOFT


def test_erosion_is_deterministic_per_seed():
    mask = disc_mask(32, 10)
    first = erode_support_foreground(mask, 0.35, RngStream(9))
    second = erode_support_foreground(mask, 0.35, RngStream(9))
    assert torch.equal(first.data, second.data)


@pytest.mark.parametrize("ratio", [0.0, -0.2, 1.5])
def test_erosion_rejects_out_of_range_ratio(ratio):
    with pytest.raises(ValueError):
        erode_support_foreground(Mask.binary(torch.ones(4, 4)), ratio, RngStream(0))


def test_erosion_of_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        erode_support_foreground(Mask.binary(torch.zeros(4, 4)), 0.5, RngStream(0))
