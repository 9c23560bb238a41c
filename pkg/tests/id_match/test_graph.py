import torch
import pytest
import logging

import id_match
from id_match import graph, numcore
from id_match.errors import DomainError, EmptyGraphError, ShapeError
from id_match.graph import CharacterMask, FeatureMap, IdentityMatchingGraph, MatchConfig, MqaParams
from id_match.synth import SceneSpec, gen_scene

from random_scenes import random_scene

torch.random.manual_seed(10086)


def max_diff(a, b):
    return (a - b).abs().max().item()


def strip(identity, h, w, cols):
    grid = torch.zeros((h, w), dtype=torch.bool)
    grid[:, cols[0]:cols[1]] = True
    return CharacterMask(identity, grid)


# ---------------------------------------------------------------- masks

def test_interp_mask_any_pooling():
    grid = torch.zeros((16, 16), dtype=torch.bool)
    grid[5, 9] = True
    out = graph.interp_mask(CharacterMask(3, grid), (4, 4))
    expected = torch.zeros((4, 4), dtype=torch.bool)
    expected[1, 2] = True
    assert torch.equal(out.grid, expected)
    assert out.coverage[1, 2].item() == 1


def test_interp_mask_full_and_identity():
    full = CharacterMask(0, torch.ones((16, 16), dtype=torch.bool))
    out = graph.interp_mask(full, (4, 4))
    assert bool(out.grid.all())
    assert bool((out.coverage == 16).all())
    assert graph.interp_mask(full, (16, 16)) is full


def test_interp_mask_non_divisible_bins():
    grid = torch.zeros((5, 5), dtype=torch.bool)
    grid[2, 2] = True
    out = graph.interp_mask(CharacterMask(0, grid), (2, 2))
    # the middle row/column lies in both adaptive bins
    assert bool(out.grid.all())


def test_interp_mask_empty_warns(caplog):
    empty = CharacterMask(4, torch.zeros((8, 8), dtype=torch.bool))
    with caplog.at_level(logging.WARNING):
        out = graph.interp_mask(empty, (4, 4))
    assert out.empty and out.empty_warning
    assert "identity 4" in caplog.text


def test_resolve_overlaps_by_coverage():
    a = torch.zeros((4, 4), dtype=torch.bool)
    a[0:3, 0:3] = True
    b = torch.zeros((4, 4), dtype=torch.bool)
    b[0:1, 0:4] = True
    low_a = graph.interp_mask(CharacterMask(0, a), (2, 2))
    low_b = graph.interp_mask(CharacterMask(1, b), (2, 2))
    ra, rb = graph.resolve_overlaps([low_a, low_b])
    assert not bool((ra.grid & rb.grid).any())
    # cell (0, 0): coverage 4 for a, 2 for b
    assert ra.grid[0, 0] and not rb.grid[0, 0]
    # cell (0, 1): a covers 2, b covers 2, the smaller identity wins
    assert ra.grid[0, 1] and not rb.grid[0, 1]


def test_resolve_overlaps_tie_goes_to_smaller_identity():
    grid = torch.ones((2, 2), dtype=torch.bool)
    hi, lo = graph.resolve_overlaps([CharacterMask(7, grid), CharacterMask(2, grid)])
    assert lo.grid.all() and hi.empty


def test_resolve_overlaps_resolution_mismatch():
    with pytest.raises(ShapeError):
        graph.resolve_overlaps([
            CharacterMask(0, torch.ones((2, 2), dtype=torch.bool)),
            CharacterMask(1, torch.ones((4, 4), dtype=torch.bool)),
        ])


def test_character_mask_validation():
    with pytest.raises(DomainError):
        CharacterMask(0, torch.tensor([[0, 2], [1, 0]]))
    with pytest.raises(ShapeError):
        CharacterMask(0, torch.ones(4, dtype=torch.bool))


# ---------------------------------------------------------------- MQA

def test_mqa_scores_background_mask_sums_to_query_count():
    f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(1, 3, 8, 8, background_mask_enabled=True)
    nodes, r_all = graph.build_nodes(f_ref, masks_ref, aggregate=True)
    (g_node,) = graph.build_nodes(f_gen, masks_gen[:1])
    v_g = masks_gen[0].flat()
    result = graph.mqa_scores(g_node, r_all, params, v_g, [mask.flat() for mask in masks_ref])
    assert result.attention.shape == (64, 64)
    assert result.scores.sum().item() == pytest.approx(v_g.sum().item(), abs=1e-9)


def test_mqa_scores_errors():
    f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(2, 2, 8, 8)
    _, r_all = graph.build_nodes(f_ref, masks_ref, aggregate=True)
    (g_node,) = graph.build_nodes(f_gen, masks_gen[:1])
    v_r = [mask.flat() for mask in masks_ref]
    with pytest.raises(DomainError, match="empty generated mask"):
        graph.mqa_scores(g_node, r_all, params, torch.zeros(64, dtype=torch.bool), v_r)
    with pytest.raises(DomainError):
        graph.mqa_scores(g_node, r_all, params, masks_gen[0].flat(), [torch.zeros(64, dtype=torch.bool)])
    with pytest.raises(ShapeError):
        graph.mqa_scores(g_node, r_all, params, masks_gen[0].flat()[:10], v_r)


def test_edge_weights():
    w = graph.edge_weights(torch.tensor([3.0, 1.0], dtype=torch.float64), gamma=1e-8)
    torch.testing.assert_close(w, torch.tensor([0.75, 0.25], dtype=torch.float64), rtol=1e-7, atol=1e-7)
    assert w.sum().item() < 1.0
    w = graph.edge_weights(torch.zeros(2, dtype=torch.float64))
    assert bool((w == 0).all())
    with pytest.raises(DomainError):
        graph.edge_weights(torch.tensor([-1.0, 1.0]))


def test_edge_weights_float32_stay_below_one():
    w = graph.edge_weights(torch.tensor([5.0]))
    assert w.dtype == torch.float64
    assert 0.0 < w.item() < 1.0
    w = graph.edge_weights(torch.tensor([30.0, 2.0, 0.5]))
    assert w.sum().item() < 1.0


# ---------------------------------------------------------------- IMG vs oracle

@pytest.mark.parametrize('mode', ['fast', 'pairwise'])
@pytest.mark.parametrize('background_mask_enabled', [False, True])
def test_build_img_matches_oracle(mode, background_mask_enabled):
    sizes = [8, 12, 16]
    worst = 0.0
    for seed in range(50):
        m = 2 + seed % 3
        h = w = sizes[seed % 3]
        n = m if seed % 4 else max(1, m - 1)
        scene = random_scene(seed, m, h, w, n=n, mode=mode, background_mask_enabled=background_mask_enabled)
        img = graph.build_img(*scene)
        ref = id_match.testing.naive_oracle_img(*scene)
        assert img.ref_ids == ref.ref_ids
        assert img.gen_ids == ref.gen_ids
        assert img.ground_truth == ref.ground_truth
        worst = max(worst, max_diff(img.weights, ref.weights))
    logging.info("mode {} background {}: max weight diff {:.3e}".format(mode, background_mask_enabled, worst))
    assert worst <= 1e-6


def test_build_img_float32_close_to_oracle():
    for seed in range(10):
        scene = random_scene(seed, 3, 12, 12, dtype=torch.float32)
        img = graph.build_img(*scene)
        ref = id_match.testing.naive_oracle_img(*scene)
        assert img.weights.dtype == torch.float64
        assert max_diff(img.weights.double(), ref.weights) <= 1e-5


def test_build_img_orders_left_to_right():
    h, w = 4, 8
    f = FeatureMap(torch.randn((4, h, w)))
    masks_ref = [strip(5, h, w, (5, 8)), strip(1, h, w, (0, 3))]
    masks_gen = [strip(9, h, w, (0, 3)), strip(8, h, w, (5, 8))]
    params = MqaParams.random(4, 4)
    img = graph.build_img(f, f, masks_ref, masks_gen, {9: 5, 8: 1}, params)
    assert img.ref_ids == [1, 5]
    assert img.gen_ids == [9, 8]
    assert img.ground_truth == {0: 1, 1: 0}
    assert img.weights.shape == (2, 2)


def test_build_img_rejects_bad_input():
    f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(3, 2, 8, 8)
    with pytest.raises(DomainError):
        graph.build_img(f_ref, f_gen, masks_ref[:1], masks_gen, gt, params)
    bad = {g: masks_ref[0].identity for g in gt}
    with pytest.raises(DomainError, match="injective"):
        graph.build_img(f_ref, f_gen, masks_ref, masks_gen, bad, params)


def test_build_img_drops_vanished_characters(caplog):
    h, w = 8, 8
    f = FeatureMap(torch.randn((4, h, w)))
    masks_ref = [strip(0, h, w, (0, 4)), strip(1, h, w, (4, 8))]
    empty = CharacterMask(1, torch.zeros((h, w), dtype=torch.bool))
    with caplog.at_level(logging.WARNING):
        img = graph.build_img(f, f, masks_ref, [strip(0, h, w, (0, 4)), empty], {0: 0, 1: 1}, MqaParams.random(4, 4))
    assert img.gen_ids == [0]
    assert img.dropped == (1,)
    with pytest.raises(EmptyGraphError):
        graph.build_img(f, f, masks_ref, [empty], {1: 1}, MqaParams.random(4, 4))


def test_pairwise_differs_from_fast():
    scene = random_scene(4, 3, 8, 8, mode="fast")
    fast = graph.build_img(*scene)
    f_ref, f_gen, masks_ref, masks_gen, gt, params = scene
    pairwise_params = MqaParams(params.w_q, params.w_k, mode="pairwise")
    pairwise = graph.build_img(f_ref, f_gen, masks_ref, masks_gen, gt, pairwise_params)
    assert max_diff(fast.weights, pairwise.weights) > 1e-3


# ---------------------------------------------------------------- C and L_match

def hand_graph(weights, gt):
    weights = torch.tensor(weights, dtype=torch.float64)
    return IdentityMatchingGraph(
        ref_ids=list(range(weights.shape[1])), gen_ids=list(range(weights.shape[0])),
        weights=weights, ground_truth=gt,
    )


def test_consistency_score_examples():
    assert graph.consistency_score(hand_graph([[0.9, 0.1], [0.2, 0.8]], {0: 0, 1: 1})).item() == pytest.approx(0.85)
    assert graph.consistency_score(hand_graph([[1.0, 0.0], [0.0, 1.0]], {0: 0, 1: 1})).item() == pytest.approx(1.0)
    assert graph.consistency_score(hand_graph([[0.5, 0.5], [0.5, 0.5]], {0: 0, 1: 1})).item() == pytest.approx(0.5)
    assert graph.consistency_score(hand_graph([[0.3]], {0: 0})).item() == pytest.approx(1.0)


def test_consistency_score_degenerate(caplog):
    img = hand_graph([[0.0, 0.0]], {0: 1})
    assert img.degenerate
    with caplog.at_level(logging.WARNING):
        assert graph.consistency_score(img).item() == 0.0
    assert "degenerate" in caplog.text
    with pytest.raises(DomainError):
        graph.matching_loss([img])


def test_matching_loss_is_negative_mean_c():
    a = hand_graph([[0.9, 0.1], [0.2, 0.8]], {0: 0, 1: 1})
    b = hand_graph([[0.5, 0.5], [0.5, 0.5]], {0: 0, 1: 1})
    assert graph.matching_loss([a, b]).item() == pytest.approx(-(0.85 + 0.5) / 2)
    with pytest.raises(DomainError):
        graph.matching_loss([])


def test_consistency_matches_oracle_score():
    for seed in range(5):
        scene = random_scene(seed, 3, 8, 8)
        img = graph.build_img(*scene)
        assert graph.consistency_score(img).item() == pytest.approx(
            id_match.testing.consistency_score(id_match.testing.naive_oracle_img(*scene)), abs=1e-9)


def relabel(masks_ref, masks_gen, gt, ref_map, gen_map):
    masks_ref2 = [CharacterMask(ref_map[mask.identity], mask.grid) for mask in masks_ref]
    masks_gen2 = [CharacterMask(gen_map[mask.identity], mask.grid) for mask in masks_gen]
    return masks_ref2, masks_gen2, {gen_map[g]: ref_map[r] for g, r in gt.items()}


def weights_by_identity(img):
    return {
        (g, r): img.weights[j, i].item()
        for j, g in enumerate(img.gen_ids)
        for i, r in enumerate(img.ref_ids)
    }


def test_relabel_invariance():
    f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(5, 3, 8, 8)
    c = graph.consistency_score(graph.build_img(f_ref, f_gen, masks_ref, masks_gen, gt, params)).item()
    # an order-preserving relabelling keeps every tie break
    ref_map = {mask.identity: 100 + 3 * mask.identity for mask in masks_ref}
    gen_map = {mask.identity: 200 + 5 * mask.identity for mask in masks_gen}
    c2 = graph.consistency_score(
        graph.build_img(f_ref, f_gen, *relabel(masks_ref, masks_gen, gt, ref_map, gen_map), params)).item()
    assert c2 == pytest.approx(c, abs=1e-12)


@pytest.mark.parametrize('mode', ['fast', 'pairwise'])
def test_permuted_labels_move_weights_with_identities(mode):
    for seed in range(20):
        m = 2 + seed % 3
        f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(seed, m, 8, 8, mode=mode)
        img = graph.build_img(f_ref, f_gen, masks_ref, masks_gen, gt, params)

        ref_ids = sorted(mask.identity for mask in masks_ref)
        gen_ids = sorted(mask.identity for mask in masks_gen)
        ref_map = dict(zip(ref_ids, reversed(ref_ids)))
        gen_map = dict(zip(gen_ids, gen_ids[1:] + gen_ids[:1]))
        img2 = graph.build_img(f_ref, f_gen, *relabel(masks_ref, masks_gen, gt, ref_map, gen_map), params)

        before = weights_by_identity(img)
        after = weights_by_identity(img2)
        for (g, r), w in before.items():
            assert after[(gen_map[g], ref_map[r])] == pytest.approx(w, abs=1e-12)
        assert graph.consistency_score(img2).item() == pytest.approx(graph.consistency_score(img).item(), abs=1e-12)


def test_oracle_relabel_equivariance():
    for seed in range(5):
        f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(seed, 3, 6, 6)
        ref = id_match.testing.naive_oracle_img(f_ref, f_gen, masks_ref, masks_gen, gt, params)
        ref_ids = sorted(mask.identity for mask in masks_ref)
        ref_map = dict(zip(ref_ids, ref_ids[1:] + ref_ids[:1]))
        gen_map = {mask.identity: mask.identity for mask in masks_gen}
        ref2 = id_match.testing.naive_oracle_img(
            f_ref, f_gen, *relabel(masks_ref, masks_gen, gt, ref_map, gen_map), params)
        before = weights_by_identity(ref)
        after = weights_by_identity(ref2)
        for (g, r), w in before.items():
            assert after[(g, ref_map[r])] == pytest.approx(w, abs=1e-12)
        c, c2 = id_match.testing.consistency_score(ref), id_match.testing.consistency_score(ref2)
        assert c2 == pytest.approx(c, abs=1e-12)


@pytest.mark.parametrize('m', [2, 3, 4])
def test_random_baseline(m):
    total = 0.0
    for seed in range(200):
        scene = random_scene(1000 * m + seed, m, 8, 8, std=0.02, dtype=torch.float32)
        total += graph.consistency_score(graph.build_img(*scene)).item()
    mean_c = total / 200
    logging.info("m={} random baseline C {:.4f}".format(m, mean_c))
    assert abs(mean_c - 1.0 / m) <= 0.05


def test_monotone_response_to_gt_affinity():
    h, w, c = 4, 8, 4
    basis = torch.eye(c, dtype=torch.float64)
    masks = [strip(0, h, w, (0, 4)), strip(1, h, w, (4, 8))]
    f_ref = torch.zeros((c, h, w), dtype=torch.float64)
    f_ref[:, :, 0:4] = basis[0][:, None, None]
    f_ref[:, :, 4:8] = basis[1][:, None, None]
    params = MqaParams(torch.eye(c, dtype=torch.float64), torch.eye(c, dtype=torch.float64))
    scores = []
    for s in [0.0, 1.0, 2.0, 4.0]:
        img = graph.build_img(FeatureMap(f_ref), FeatureMap(f_ref * s), masks, masks, {0: 0, 1: 1}, params)
        scores.append(graph.consistency_score(img).item())
    assert scores[0] == pytest.approx(0.5)
    assert all(a < b for a, b in zip(scores, scores[1:]))


@pytest.mark.parametrize('dtype, tol', [(torch.float64, 1e-5), (torch.float32, 1e-3)])
def test_fast_path_invariants(dtype, tol):
    for seed in range(100):
        m = 2 + seed % 3
        f_ref, f_gen, masks_ref, masks_gen, gt, params = random_scene(
            seed, m, 8, 8, dtype=dtype, background_mask_enabled=True)
        img = graph.build_img(f_ref, f_gen, masks_ref, masks_gen, gt, params)
        counts = torch.tensor([int(mask.grid.sum()) for mask in graph.order_left_to_right(masks_gen)],
                              dtype=torch.float64)
        assert max_diff(img.scores.double().sum(dim=1), counts) <= tol

        literal = MqaParams(params.w_q, params.w_k)
        img = graph.build_img(f_ref, f_gen, masks_ref, masks_gen, gt, literal)
        assert img.weights.dtype == torch.float64
        assert bool((img.weights >= 0).all()) and bool((img.weights < 1.0).all())
        assert bool((img.weights.sum(dim=1) < 1.0).all())


def test_synthetic_scene_rows_below_one_in_float32():
    scene = gen_scene(SceneSpec(), seed=0)
    params = MqaParams.random(8, 16)
    img = graph.build_img(
        scene.f_ref, scene.target_features, scene.masks_ref, scene.masks_gen, scene.gt, params)
    assert bool((img.weights.sum(dim=1) < 1.0).all())
    single = graph.build_img(
        scene.f_ref, scene.target_features, scene.masks_ref[:1], scene.masks_gen[:1], {0: 0}, params)
    assert single.weights.item() < 1.0
    assert graph.consistency_score(single).item() == 1.0


# ---------------------------------------------------------------- multi-scale and gradients

def test_pyramid_and_multiscale():
    scene = gen_scene(SceneSpec(), seed=3)
    pyramid = graph.build_pyramid(scene.f_ref, 3)
    assert [f.resolution for f in pyramid] == [(16, 16), (8, 8), (4, 4)]
    assert [f.layer for f in pyramid] == [1, 2, 3]
    config = MatchConfig([MqaParams.random(8, 16) for _ in range(3)])
    graphs, skipped = graph.build_multiscale(
        scene.f_ref, scene.target_features, scene.masks_ref, scene.masks_gen, scene.gt, config)
    assert [img.layer for img in graphs] == [1, 2, 3]
    assert skipped == []


def test_downsample_too_small():
    with pytest.raises(ShapeError):
        graph.downsample_features(FeatureMap(torch.randn((2, 1, 4))))


@pytest.mark.parametrize('mode', ['fast', 'pairwise'])
def test_matching_loss_grad_check(mode):
    spec = SceneSpec(height=8, width=8, channels=4, chars=2, sigma=0.1)
    worst = 0.0
    for seed in range(10):
        scene = gen_scene(spec, seed)
        g = torch.Generator().manual_seed(seed)
        f_ref = FeatureMap(scene.f_ref.values.double())
        f_gen = scene.target_features.values.double() + 0.1 * torch.randn((4, 8, 8), generator=g, dtype=torch.float64)
        params = MqaParams.random(4, 4, generator=g, std=0.5, dtype=torch.float64, mode=mode)

        def loss(x, w_q, w_k):
            config = MatchConfig([MqaParams(w_q, w_k, mode=mode), MqaParams(w_q, w_k, mode=mode)])
            graphs, _ = graph.build_multiscale(
                f_ref, FeatureMap(x), scene.masks_ref, scene.masks_gen, scene.gt, config)
            return graph.matching_loss(graphs)

        errs = [
            numcore.grad_check(lambda v: loss(f_gen, v, params.w_k), params.w_q),
            numcore.grad_check(lambda v: loss(f_gen, params.w_q, v), params.w_k),
            numcore.grad_check(lambda v: loss(v, params.w_q, params.w_k), f_gen),
        ]
        worst = max(worst, *errs)
    logging.info("mode {}: matching loss grad_check {:.3e}".format(mode, worst))
    assert worst <= 1e-3


def test_matching_loss_gradients_reach_projections():
    scene = gen_scene(SceneSpec(), seed=0)
    params = MqaParams.random(8, 16, std=0.3)
    params.w_q.requires_grad_(True)
    params.w_k.requires_grad_(True)
    graphs, _ = graph.build_multiscale(
        scene.f_ref, scene.target_features, scene.masks_ref, scene.masks_gen, scene.gt, MatchConfig([params]))
    dq, dk = numcore.backward(graph.matching_loss(graphs), (params.w_q, params.w_k))
    assert dq.abs().sum().item() > 0
    assert dk.abs().sum().item() > 0
