import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from herbs.errors import SelectionRangeError, ShapeMismatchError
from herbs.suppression import (
    BsLossWeights,
    ClassificationMap,
    GraphCombiner,
    bs_total,
    classify_locations,
    combine,
    dropped_loss,
    layer_logits,
    layer_loss,
    max_score,
    merged_loss,
    select_topk,
)

from conftest import central_difference, rel_error

mpmath.mp.dps = 40


def _mp_softmax(xs):
    e = [mpmath.e ** mpmath.mpf(x) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def _cmap_from_scores(scores: torch.Tensor, C: int = 3) -> ClassificationMap:
    """A map whose max_score field is given directly; logits are placeholders."""
    B, H, W = scores.shape
    return ClassificationMap(torch.zeros(B, C, H, W), scores)


# classify_locations ---------------------------------------------------------


def test_identity_head_returns_features():
    head = nn.Linear(4, 4)
    with torch.no_grad():
        head.weight.copy_(torch.eye(4))
        head.bias.zero_()
    feat = torch.randn(2, 4, 1, 1)
    torch.testing.assert_close(classify_locations(feat, head).logits, feat, rtol=0, atol=0)


def test_uniform_logits_give_half():
    assert max_score(torch.zeros(1, 2, 3, 3)).eq(0.5).all()


def test_max_score_matches_high_precision():
    expected = float(max(_mp_softmax([1, 2, 3])))
    got = float(max_score(torch.tensor([1.0, 2.0, 3.0]).view(1, 3, 1, 1)))
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.6652) < 1e-4


def test_classify_matches_per_location_linear():
    torch.manual_seed(0)
    head = nn.Linear(6, 5)
    feat = torch.randn(2, 6, 3, 4)
    cmap = classify_locations(feat, head)
    for h in range(3):
        for w in range(4):
            torch.testing.assert_close(cmap.logits[:, :, h, w], head(feat[:, :, h, w]), rtol=1e-12, atol=1e-12)
    sums = torch.softmax(cmap.logits, 1).sum(1)
    torch.testing.assert_close(sums, torch.ones_like(sums), rtol=0, atol=1e-6)


def test_classify_rejects_dim_mismatch():
    with pytest.raises(ShapeMismatchError):
        classify_locations(torch.randn(1, 3, 2, 2), nn.Linear(4, 2))


def test_softmax_stable_at_large_logits():
    logits = torch.tensor([100.0, -100.0, 99.0]).view(1, 3, 1, 1)
    s = max_score(logits)
    assert torch.isfinite(s).all()
    assert abs(float(torch.softmax(logits, 1).sum()) - 1) < 1e-6


# select_topk ------------------------------------------------------------------


def test_select_small_example():
    scores = torch.tensor([[[0.9, 0.2], [0.7, 0.4]]])
    sel = select_topk(_cmap_from_scores(scores), torch.randn(1, 2, 2, 2), 2)
    assert set(sel.selected_idx[0].tolist()) == {0, 2}


def test_select_ties_by_ascending_index():
    sel = select_topk(_cmap_from_scores(torch.full((1, 2, 2), 0.3)), torch.randn(1, 2, 2, 2), 3)
    assert sel.selected_idx[0].tolist() == [0, 1, 2]


def test_select_all_leaves_nothing_dropped():
    feat = torch.randn(1, 2, 2, 2)
    sel = select_topk(_cmap_from_scores(torch.rand(1, 2, 2)), feat, 4)
    assert sel.dropped_logits.shape == (1, 0, 3)
    assert float(dropped_loss(sel.dropped_logits)) == 0.0


@pytest.mark.parametrize("k", [0, 5])
def test_select_rejects_bad_k(k):
    with pytest.raises(SelectionRangeError):
        select_topk(_cmap_from_scores(torch.rand(1, 2, 2)), torch.randn(1, 2, 2, 2), k)


def test_selection_partitions_locations():
    torch.manual_seed(1)
    head = nn.Linear(4, 6)
    feat = torch.randn(2, 4, 5, 3)
    cmap = classify_locations(feat, head)
    sel = select_topk(cmap, feat, 7)
    flat = cmap.logits.reshape(2, 6, 15).transpose(1, 2)
    for b in range(2):
        idx = torch.cat([sel.selected_idx[b], sel.dropped_idx[b]])
        assert sorted(idx.tolist()) == list(range(15))
        torch.testing.assert_close(torch.cat([sel.selected_logits[b], sel.dropped_logits[b]]), flat[b, idx],
                                   rtol=0, atol=0)
        torch.testing.assert_close(sel.selected_feats[b], feat[b].reshape(4, 15).T[sel.selected_idx[b]],
                                   rtol=0, atol=0)
    assert sel.mask(5, 3).sum() == 14


def test_selection_indices_carry_no_gradient():
    feat = torch.randn(1, 3, 2, 2, requires_grad=True)
    head = nn.Linear(3, 4)
    sel = select_topk(classify_locations(feat, head), feat, 2)
    assert not sel.selected_idx.requires_grad
    sel.selected_feats.sum().backward()
    grad = feat.grad.reshape(3, 4)
    chosen = set(sel.selected_idx[0].tolist())
    for loc in range(4):
        assert (grad[:, loc].abs().sum() > 0) == (loc in chosen)


# combiner ---------------------------------------------------------------------


def test_single_token_reduces_to_classifier():
    comb = GraphCombiner(4, 3, act="identity")
    with torch.no_grad():
        comb.weight.weight.copy_(torch.eye(4))
    token = torch.randn(2, 1, 4)
    torch.testing.assert_close(comb(token), comb.classifier(token[:, 0]), rtol=1e-12, atol=1e-12)


def test_adjacency_row_normalised():
    comb = GraphCombiner(5, 2)
    adj = comb.adjacency(torch.randn(3, 7, 5))
    torch.testing.assert_close(adj.sum(-1), torch.ones(3, 7), rtol=0, atol=1e-12)


def test_combiner_token_order_invariant():
    torch.manual_seed(0)
    comb = GraphCombiner(8, 4)
    tokens = torch.randn(2, 11, 8)
    perm = torch.randperm(11)
    torch.testing.assert_close(comb(tokens[:, perm]), comb(tokens), rtol=0, atol=1e-6)


def test_default_k_concatenates_480_tokens():
    dim = 4
    sels = []
    for k, size in zip((256, 128, 64, 32), (32, 16, 8, 8)):
        feat = torch.randn(1, dim, size, size)
        sels.append(select_topk(classify_locations(feat, nn.Linear(dim, 3)), feat, k))
    seen = []
    comb = GraphCombiner(dim, 3)
    comb.register_forward_pre_hook(lambda m, args: seen.append(args[0].shape[1]))
    combine(sels, comb)
    assert seen == [480]


def test_combine_rejects_empty_and_mixed_dims():
    comb = GraphCombiner(4, 3)
    with pytest.raises(SelectionRangeError):
        combine([], comb)
    a = torch.randn(1, 4, 2, 2)
    b = torch.randn(1, 5, 2, 2)
    sa = select_topk(classify_locations(a, nn.Linear(4, 3)), a, 1)
    sb = select_topk(classify_locations(b, nn.Linear(5, 3)), b, 1)
    with pytest.raises(ShapeMismatchError):
        combine([sa, sb], comb)


# losses -----------------------------------------------------------------------


def test_merged_loss_uniform_and_saturated():
    assert abs(float(merged_loss(torch.zeros(3, 200), torch.tensor([0, 5, 199]))) - math.log(200)) < 1e-12
    logits = torch.full((1, 4), -30.0)
    logits[0, 2] = 30.0
    assert float(merged_loss(logits, torch.tensor([2]))) < 1e-9


def test_merged_loss_matches_high_precision():
    expected = float(-mpmath.log(_mp_softmax([1, 2, 3])[0]))
    got = float(merged_loss(torch.tensor([[1.0, 2.0, 3.0]]), torch.tensor([0])))
    assert abs(got - expected) < 1e-12
    assert abs(got - 2.4076) < 1e-4


def test_dropped_loss_zero_logits():
    assert float(dropped_loss(torch.zeros(1, 1, 5))) == 5.0


def test_dropped_loss_single_entry_from_atanh():
    y = float(mpmath.atanh(mpmath.mpf(-0.5)))
    got = float(dropped_loss(torch.tensor([[[y]]])))
    assert abs(got - 0.25) < 1e-12
    assert abs(y + 0.5493) < 1e-4


def test_dropped_loss_vanishes_at_large_negative_logits():
    assert float(dropped_loss(torch.full((2, 3, 4), -40.0))) < 1e-30


def test_dropped_loss_is_mean_over_batch_and_locations():
    torch.manual_seed(0)
    y = torch.randn(3, 7, 4)
    expected = np.mean([[np.sum((np.tanh(v) + 1) ** 2) for v in row] for row in y.numpy()])
    assert abs(float(dropped_loss(y)) - expected) < 1e-12


def test_dropped_loss_softmax_mode_targets_uniform():
    assert float(dropped_loss(torch.full((1, 3, 6), 2.5), "softmax")) < 1e-30
    assert float(dropped_loss(torch.tensor([[[1.0, 0.0]]]), "softmax")) > 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(0.1, 3.0))
def test_dropped_loss_positive_and_decreasing_along_ray(values, t):
    y = torch.tensor(values).view(1, 1, -1)
    base = float(dropped_loss(y))
    assert base > 0
    assert float(dropped_loss(y - t)) < base


def test_layer_loss_uniform_four_stages():
    heads = [nn.Linear(3, 10) for _ in range(4)]
    for h in heads:
        nn.init.zeros_(h.weight)
        nn.init.zeros_(h.bias)
    feats = [torch.randn(2, 3, 8 >> i, 8 >> i) for i in range(4)]
    got = float(layer_loss(feats, heads, torch.tensor([1, 7])))
    assert abs(got - 4 * math.log(10)) < 1e-12
    assert abs(got - 9.2103) < 1e-4


def test_layer_logits_on_constant_map_match_any_location():
    head = nn.Linear(3, 4)
    feat = torch.randn(1, 3, 1, 1).expand(1, 3, 5, 5).contiguous()
    torch.testing.assert_close(layer_logits(feat, head), classify_locations(feat, head).logits[:, :, 2, 3],
                               rtol=0, atol=1e-14)


def test_layer_loss_recomposes_per_stage_cross_entropy():
    torch.manual_seed(3)
    heads = [nn.Linear(4, 5), nn.Linear(4, 5)]
    feats = [torch.randn(3, 4, 4, 4), torch.randn(3, 4, 2, 2)]
    labels = torch.tensor([0, 3, 4])
    by_hand = 0.0
    for f, h in zip(feats, heads):
        z = (h.weight @ f.mean((2, 3)).T).T + h.bias
        logp = z - torch.logsumexp(z, 1, keepdim=True)
        by_hand += float(-logp[torch.arange(3), labels].mean())
    assert abs(float(layer_loss(feats, heads, labels)) - by_hand) < 1e-10


def test_layer_loss_rejects_count_mismatch():
    with pytest.raises(ShapeMismatchError):
        layer_loss([torch.randn(1, 2, 2, 2)], [nn.Linear(2, 2)] * 2, torch.tensor([0]))


def test_bs_total_arithmetic():
    w = BsLossWeights()
    assert (w.merged, w.dropped, w.layer) == (1.0, 5.0, 0.3)
    assert abs(bs_total(1.0, 0.5, 2.0, w) - 4.1) < 1e-12
    assert bs_total(0.0, 0.0, 0.0, w) == 0.0
    no_drop = BsLossWeights(dropped=0.0)
    assert bs_total(1.0, 0.5, 2.0, no_drop) == bs_total(1.0, 123.0, 2.0, no_drop)


def test_bs_gradient_matches_finite_differences():
    torch.manual_seed(0)
    dim, C = 6, 4
    head = nn.Linear(dim, C)
    comb = GraphCombiner(dim, C)
    feat = torch.randn(2, dim, 4, 4, requires_grad=True)
    labels = torch.tensor([1, 3])

    def loss():
        cmap = classify_locations(feat, head)
        sel = select_topk(cmap, feat, 5)
        return bs_total(merged_loss(combine([sel], comb), labels), dropped_loss(sel.dropped_logits),
                        layer_loss([feat], [head], labels))

    loss().backward()
    rng = np.random.default_rng(0)
    params = [head.weight, head.bias, comb.weight.weight, comb.query.weight, comb.classifier.weight, feat]
    for n in range(10):
        p = params[n % len(params)]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        assert rel_error(float(p.grad[idx]), central_difference(loss, p, idx), floor=1e-6) < 1e-4
