"""Tests for the object mining generator."""

import pytest
import torch

from app.config import MinerConfig
from app.errors import ShapeError
from app.services.object_miner import ObjectMiner, predict_mask, support_tokens


def make_miner(
    num_scales: int = 3, dim: int = 16, heads: int = 4, aggregation: str = "query_centric"
) -> ObjectMiner:
    torch.manual_seed(0)
    cfg = MinerConfig(num_scales=num_scales, heads=heads, aggregation=aggregation)
    return ObjectMiner(cfg, dim)


# =============================================================================
# PYRAMID
# =============================================================================


def test_pyramid_halves_extent_per_level():
    levels = make_miner().build_pyramid(torch.randn(1, 16, 32, 32))
    assert [tuple(x.shape[-2:]) for x in levels] == [(32, 32), (16, 16), (8, 8)]
    assert all(x.shape[1] == 16 for x in levels)


def test_single_scale_pyramid_is_the_input():
    f_q = torch.randn(2, 16, 4, 4)
    levels = make_miner(num_scales=1).build_pyramid(f_q)
    assert len(levels) == 1
    assert levels[0] is f_q


def test_pyramid_rejects_indivisible_extent():
    with pytest.raises(ShapeError):
        make_miner(num_scales=3).build_pyramid(torch.randn(1, 16, 6, 6))


# =============================================================================
# AGGREGATION
# =============================================================================


def test_zero_pseudo_support_stays_finite():
    miner = make_miner()
    logits, state = miner(torch.randn(1, 16, 8, 8), torch.zeros(1, 8, 8))
    assert torch.isfinite(logits).all()
    assert all(torch.equal(p, torch.zeros_like(p)) for p in state.pseudo_support)


def test_matching_pixel_receives_most_weight():
    """Under softmax over query positions, the query pixel equal to the only
    non-zero pseudo-support pixel gathers the largest total weight."""
    miner = ObjectMiner(MinerConfig(num_scales=1, heads=1), dim=4, gn_groups=1)
    layer = miner.aggregate[0].layers[0]
    with torch.no_grad():
        for proj in (layer.to_q, layer.to_k, layer.to_v):
            proj.weight.copy_(torch.eye(4))
    f_q = torch.eye(4).reshape(4, 2, 2).unsqueeze(0)  # pixel i holds one-hot e_i
    f_psd = torch.zeros_like(f_q)
    f_psd[0, :, 1, 0] = f_q[0, :, 1, 0]
    _, attn = miner.aggregate_scale(0, f_q, f_psd)
    received = attn[0, 0].sum(dim=-1)
    assert int(received.argmax()) == 2


def test_aggregate_rejects_mismatched_shapes():
    miner = make_miner()
    with pytest.raises(ShapeError):
        miner.aggregate_scale(0, torch.randn(1, 16, 8, 8), torch.randn(1, 16, 4, 4))


# =============================================================================
# SUPPORT-CENTRIC BASELINE
# =============================================================================


def square_supports(batch: int = 1, k: int = 2, dim: int = 16, size: int = 8):
    feats = torch.randn(batch, k, dim, size, size)
    masks = torch.zeros(batch, k, size, size)
    masks[..., 2:6, 2:6] = 1.0
    return feats, masks


def test_support_tokens_cover_every_shot():
    feats, masks = square_supports(k=3)
    tokens, weights = support_tokens(feats, masks, (8, 8))
    assert tokens.shape == (1, 3 * 64, 16)
    assert weights.shape == (1, 3 * 64)
    assert (weights == 0).any()
    assert torch.equal(tokens[weights == 0], torch.zeros_like(tokens[weights == 0]))


def test_support_centric_forward_uses_support_tokens():
    miner = make_miner(num_scales=2, aggregation="support_centric")
    feats, masks = square_supports()
    logits, state = miner(torch.randn(1, 16, 8, 8), torch.zeros(1, 8, 8), feats, masks)
    assert logits.shape == (1, 8, 8)
    assert torch.isfinite(logits).all()
    assert [tuple(a.shape) for a in state.attention] == [(1, 4, 64, 128), (1, 4, 16, 32)]
    assert [tuple(m.shape) for m in state.source_mask] == [(1, 128), (1, 32)]


def test_support_centric_softmax_runs_over_support_positions():
    miner = make_miner(num_scales=1, aggregation="support_centric")
    feats, masks = square_supports()
    _, state = miner(torch.randn(1, 16, 8, 8), torch.zeros(1, 8, 8), feats, masks)
    rows = state.attention[0].sum(dim=-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-5)


def test_support_centric_needs_supports():
    miner = make_miner(aggregation="support_centric")
    with pytest.raises(ShapeError):
        miner(torch.randn(1, 16, 8, 8), torch.zeros(1, 8, 8))


def test_query_centric_has_no_query_self_attention():
    assert len(make_miner().query_self_attn) == 0
    assert len(make_miner(aggregation="support_centric").query_self_attn) == 3


def test_query_centric_source_mask_is_the_seed():
    seed = torch.zeros(1, 8, 8)
    seed[0, :4] = 1.0
    _, state = make_miner(num_scales=1)(torch.randn(1, 16, 8, 8), seed)
    assert torch.equal(state.source_mask[0], seed.flatten(1))


# =============================================================================
# FUSION AND HEAD
# =============================================================================


def test_fusion_with_zero_coarse_level_unrolls():
    miner = make_miner(num_scales=2)
    fine = torch.randn(1, 16, 4, 4)
    with torch.no_grad():
        fused = miner.fuse_topdown([fine, torch.zeros(1, 16, 2, 2)])
        expected = miner.smooth[0](miner.lateral[0](fine))
    assert torch.allclose(fused, expected, atol=1e-6)


def test_single_level_fusion_is_identity():
    fine = torch.randn(1, 16, 4, 4)
    assert torch.equal(make_miner(num_scales=1).fuse_topdown([fine]), fine)


def test_fusion_rejects_wrong_level_count():
    with pytest.raises(ShapeError):
        make_miner(num_scales=3).fuse_topdown([torch.randn(1, 16, 4, 4)])


def test_predicted_mask_is_soft_probability():
    miner = make_miner()
    logits, state = miner(torch.randn(2, 16, 8, 8), (torch.rand(2, 8, 8) > 0.5).float())
    mask = predict_mask(miner, state.fused)
    assert mask.shape == logits.shape == (2, 8, 8)
    assert ((mask >= 0) & (mask <= 1)).all()
    assert torch.allclose(mask, torch.sigmoid(logits))


def test_gradients_reach_every_parameter():
    miner = make_miner()
    seed = torch.zeros(1, 8, 8)
    seed[0, 2:6, 2:6] = 1.0
    logits, _ = miner(torch.randn(1, 16, 8, 8), seed)
    logits.pow(2).sum().backward()
    missing = [name for name, p in miner.named_parameters() if p.grad is None]
    assert missing == []
