"""Tests for prototype pooling, similarity maps and seed thresholding."""

import pytest
import torch

from app.config import LocalizerConfig, SimilarityNormalization
from app.errors import EmptyMaskError, ShapeError
from app.services.core import FeatureMap, FeatureVector, Mask
from app.services.localizer import (
    build_pseudo_support,
    kshot_combine,
    localize,
    mask_average_pool,
    normalize_similarity,
    similarity_map,
    threshold_activation,
)


def point_grid() -> tuple[FeatureVector, FeatureMap]:
    """3x3 query whose centre equals the prototype; every other position is orthogonal."""
    prototype = torch.tensor([1.0, 0.0, 0.0])
    data = torch.zeros(3, 3, 3)
    data[..., 1] = 1.0
    data[1, 1] = prototype
    return FeatureVector(prototype), FeatureMap(data)


# =============================================================================
# MASK AVERAGE POOLING
# =============================================================================


def test_full_mask_gives_spatial_mean():
    f = FeatureMap(torch.randn(4, 5, 6))
    pooled = mask_average_pool(f, Mask.binary(torch.ones(4, 5)))
    assert torch.allclose(pooled.data, f.data.mean(dim=(0, 1)), atol=1e-6)


def test_single_pixel_mask_gives_that_feature():
    f = FeatureMap(torch.randn(4, 4, 8))
    m = torch.zeros(4, 4)
    m[2, 1] = 1.0
    assert torch.allclose(mask_average_pool(f, Mask.binary(m)).data, f.data[2, 1], atol=1e-6)


def test_constant_region_pools_to_its_vector():
    u, v = torch.tensor([1.0, 2.0]), torch.tensor([-3.0, 0.5])
    data = torch.empty(4, 4, 2)
    data[:, :2], data[:, 2:] = u, v
    m = torch.zeros(4, 4)
    m[:, :2] = 1.0
    assert torch.allclose(mask_average_pool(FeatureMap(data), Mask.binary(m)).data, u)


def test_soft_weights_are_respected():
    data = torch.zeros(1, 2, 1)
    data[0, 0, 0], data[0, 1, 0] = 1.0, 3.0
    pooled = mask_average_pool(FeatureMap(data), Mask.soft(torch.tensor([[0.75, 0.25]])))
    assert pooled.data.item() == pytest.approx(1.5)


def test_empty_mask_raises():
    with pytest.raises(EmptyMaskError):
        mask_average_pool(FeatureMap(torch.randn(2, 2, 3)), Mask.binary(torch.zeros(2, 2)))


def test_mismatched_extent_raises():
    with pytest.raises(ShapeError):
        mask_average_pool(FeatureMap(torch.randn(2, 2, 3)), Mask.binary(torch.ones(3, 3)))


# =============================================================================
# SIMILARITY AND THRESHOLD
# =============================================================================


def test_constant_query_equal_to_prototype_is_all_ones():
    prototype = torch.tensor([0.3, -1.0, 2.0])
    f_q = FeatureMap(prototype.expand(5, 5, 3).clone())
    sim = similarity_map(FeatureVector(prototype), f_q)
    assert torch.allclose(sim.data, torch.ones(5, 5), atol=1e-6)


def test_point_match_peaks_at_that_position():
    f_h, f_q = point_grid()
    sim = similarity_map(f_h, f_q).data
    assert sim[1, 1].item() == pytest.approx(1.0)
    others = torch.ones(3, 3, dtype=torch.bool)
    others[1, 1] = False
    assert sim[others].max() <= 1e-6


def test_point_match_thresholds_to_single_seed():
    f_h, f_q = point_grid()
    activation = threshold_activation(similarity_map(f_h, f_q), LocalizerConfig(tau=0.7))
    expected = torch.zeros(3, 3)
    expected[1, 1] = 1.0
    assert torch.equal(activation.data, expected)


def test_nonpositive_similarity_normalises_to_zero():
    raw = -torch.rand(1, 3, 3)
    assert torch.equal(
        normalize_similarity(raw, SimilarityNormalization.MAX_NORMALIZE), torch.zeros(1, 3, 3)
    )


def test_softmax_spatial_sums_to_one():
    sim = normalize_similarity(torch.randn(2, 4, 4), SimilarityNormalization.SOFTMAX_SPATIAL)
    assert torch.allclose(sim.flatten(1).sum(dim=1), torch.ones(2), atol=1e-6)


def test_threshold_above_tau_sets_everything():
    activation = threshold_activation(Mask.soft(torch.full((4, 4), 0.9)), LocalizerConfig())
    assert torch.equal(activation.data, torch.ones(4, 4))


def test_empty_threshold_falls_back_to_topk_row_major():
    cfg = LocalizerConfig(tau=0.7, fallback_topk=4)
    activation = threshold_activation(Mask.soft(torch.full((3, 3), 0.5)), cfg)
    expected = torch.zeros(9)
    expected[:4] = 1.0
    assert torch.equal(activation.data.flatten(), expected)


def test_fallback_prefers_highest_positions():
    sim = torch.full((3, 3), 0.1)
    sim[2, 2], sim[0, 1] = 0.6, 0.5
    activation = threshold_activation(Mask.soft(sim), LocalizerConfig(fallback_topk=2))
    assert activation.data[2, 2] == 1 and activation.data[0, 1] == 1
    assert activation.foreground_count == 2


# =============================================================================
# K-SHOT AND PSEUDO SUPPORT
# =============================================================================


def test_kshot_single_activation_is_unchanged():
    m = Mask.binary(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    assert torch.equal(kshot_combine([m]).data, m.data)


def test_kshot_union():
    a = Mask.binary(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
    b = Mask.binary(torch.tensor([[0.0, 0.0], [0.0, 1.0]]))
    assert kshot_combine([a, b]).data.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_kshot_union_is_idempotent():
    a = Mask.binary(torch.tensor([[1.0, 0.0], [1.0, 0.0]]))
    assert torch.equal(kshot_combine([a] * 5).data, a.data)


def test_kshot_empty_list_raises():
    with pytest.raises(EmptyMaskError):
        kshot_combine([])


def test_pseudo_support_all_ones_is_identity():
    f_q = FeatureMap(torch.randn(3, 3, 4))
    assert torch.equal(build_pseudo_support(f_q, Mask.binary(torch.ones(3, 3))).data, f_q.data)


def test_pseudo_support_all_zeros_is_zero():
    f_q = FeatureMap(torch.randn(3, 3, 4))
    result = build_pseudo_support(f_q, Mask.binary(torch.zeros(3, 3)))
    assert torch.equal(result.data, torch.zeros(3, 3, 4))


def test_pseudo_support_single_pixel():
    f_q = FeatureMap(torch.randn(3, 3, 4))
    m = torch.zeros(3, 3)
    m[0, 2] = 1.0
    result = build_pseudo_support(f_q, Mask.binary(m)).data
    assert torch.equal(result[0, 2], f_q.data[0, 2])
    assert result.abs().sum() == f_q.data[0, 2].abs().sum()


# =============================================================================
# BATCHED LOCALISATION
# =============================================================================


def test_localize_unions_supports_and_flags_fallback():
    torch.manual_seed(0)
    query = torch.randn(1, 4, 4, 4)
    supports = query.unsqueeze(1).repeat(1, 2, 1, 1, 1)
    masks = torch.zeros(1, 2, 4, 4)
    masks[0, 0, 0, 0] = 1.0
    masks[0, 1, 3, 3] = 1.0
    loc = localize(supports, masks, query, LocalizerConfig(tau=0.7))
    assert loc.per_support.shape == (1, 2, 4, 4)
    assert torch.equal(loc.activation[0], loc.per_support[0].amax(dim=0))
    assert loc.activation[0, 0, 0] == 1 and loc.activation[0, 3, 3] == 1
    assert loc.fallback.shape == (1, 2)
