import numpy as np
import pytest

from layerprune import surgery
from layerprune.errors import SurgeryError
from layerprune.graph import build_mini_resnet, build_resnet164, count_params, graph_forward, validate
from layerprune.surgery import (
    apply_prune,
    fold_composed_init,
    fold_zero_init,
    middle_bn_id,
    plan_prune,
    select_threshold,
)

from factories import bn_params, positive_input, random_positive_sandwich, sandwich_graph


def set_middle_alphas(g, value_fn):
    """Overwrite each block's middle-BN alpha via value_fn(block_index, channels)."""
    for i, b in enumerate(g.blocks):
        node = g.node(middle_bn_id(g, b))
        node.params.alpha[...] = np.asarray(value_fn(i, node.params.channels),
                                            dtype=node.params.alpha.dtype)


def uniform_alpha_graph(seed=0, widths=(4, 8, 16), blocks=2):
    g = build_mini_resnet(blocks_per_stage=blocks, widths=widths, seed=seed)
    rng = np.random.default_rng(seed + 77)
    for n in g.bn_nodes():
        n.params.alpha[...] = rng.uniform(0.0, 1.0, n.params.channels).astype(np.float32)
    return g


class TestSelectThreshold:
    def test_order_statistics_example(self):
        g = build_mini_resnet(blocks_per_stage=1, widths=(4, 8, 16))
        # stage-1 middle BN gets [0.9, 0.4, 0.05, 0.01]; the rest sit high
        set_middle_alphas(g, lambda i, c: [0.9, 0.4, 0.05, 0.01] if i == 0 else np.full(c, 2.0))
        pooled = 4 + 8 + 16
        t = select_threshold(g, 2 / pooled)
        plan = plan_prune(g, t)
        mask = plan.keep_masks[middle_bn_id(g, g.blocks[0])]
        np.testing.assert_array_equal(mask, [True, True, False, False])
        assert all(plan.keep_masks[middle_bn_id(g, b)].all() for b in g.blocks[1:])

    def test_ratio_zero_prunes_nothing(self):
        g = uniform_alpha_graph()
        t = select_threshold(g, 0.0)
        plan = plan_prune(g, t)
        assert all(m.all() for m in plan.keep_masks.values())
        assert plan.predicted_params == count_params(g)

    def test_large_pool_hits_requested_fraction(self):
        g = build_resnet164(seed=2)
        rng = np.random.default_rng(3)
        for n in g.bn_nodes():
            n.params.alpha[...] = rng.uniform(0.0, 1.0, n.params.channels).astype(np.float32)
        pool = np.sort(np.concatenate(
            [np.abs(g.node(nid).params.alpha) for nid in surgery.prunable_bn_ids(g)]
        ))
        assert pool.size >= 1000
        t = select_threshold(g, 0.6)
        pruned = int((pool < t).sum())
        assert abs(pruned / pool.size - 0.6) <= 1e-3

    def test_ratio_bounds(self):
        g = uniform_alpha_graph()
        with pytest.raises(SurgeryError):
            select_threshold(g, 1.0)
        with pytest.raises(SurgeryError):
            select_threshold(g, -0.1)

    def test_monotone_in_ratio(self):
        g = uniform_alpha_graph(seed=5)
        ts = [select_threshold(g, r) for r in (0.1, 0.3, 0.5, 0.7)]
        assert ts == sorted(ts)
        # raw masks (before the floor rule) are nested
        for nid in surgery.prunable_bn_ids(g):
            alpha = np.abs(g.node(nid).params.alpha)
            prev = None
            for t in ts:
                mask = alpha >= t
                if prev is not None:
                    assert np.all(mask <= prev)  # keep(r2) is a subset of keep(r1)
                prev = mask


class TestPlanPrune:
    def test_keeps_single_survivor_as_candidate(self):
        g = build_mini_resnet(blocks_per_stage=1, widths=(4, 8, 16))
        set_middle_alphas(g, lambda i, c: [0.001, 0.002, 0.9, 0.95] if i == 0 else np.full(c, 2.0))
        # 3-channel variant of the same block shape: only one channel above t
        plan = plan_prune(g, 0.01)
        bn0 = middle_bn_id(g, g.blocks[0])
        np.testing.assert_array_equal(plan.keep_masks[bn0], [False, False, True, True])
        assert g.blocks[0].id not in plan.fold_candidates  # two survivors

        set_middle_alphas(g, lambda i, c: [0.001, 0.002, 0.9, 0.002] if i == 0 else np.full(c, 2.0))
        plan = plan_prune(g, 0.01)
        np.testing.assert_array_equal(plan.keep_masks[bn0], [False, False, True, False])
        assert g.blocks[0].id in plan.fold_candidates

    def test_floor_rule_keeps_max_alpha(self):
        g = build_mini_resnet(blocks_per_stage=1, widths=(4, 8, 16))
        set_middle_alphas(g, lambda i, c: [0.001, 0.003, 0.002, 0.001] if i == 0 else np.full(c, 2.0))
        plan = plan_prune(g, 0.01)
        bn0 = middle_bn_id(g, g.blocks[0])
        np.testing.assert_array_equal(plan.keep_masks[bn0], [False, True, False, False])
        assert g.blocks[0].id in plan.fold_candidates

    def test_floor_rule_tie_breaks_to_lowest_index(self):
        g = build_mini_resnet(blocks_per_stage=1, widths=(4, 8, 16))
        set_middle_alphas(g, lambda i, c: [0.002, 0.002, 0.002, 0.002] if i == 0 else np.full(c, 2.0))
        plan = plan_prune(g, 0.01)
        mask = plan.keep_masks[middle_bn_id(g, g.blocks[0])]
        np.testing.assert_array_equal(mask, [True, False, False, False])

    @pytest.mark.parametrize("seed", range(50))
    def test_predicted_params_match_applied_count(self, seed):
        g = uniform_alpha_graph(seed=seed, blocks=1)
        rng = np.random.default_rng(seed)
        t = select_threshold(g, float(rng.uniform(0.0, 0.95)))
        plan = plan_prune(g, t)
        pruned = apply_prune(g, plan)
        assert plan.predicted_params == count_params(pruned)


class TestApplyPrune:
    def test_all_keep_plan_is_identity(self):
        g = uniform_alpha_graph(seed=9)
        plan = plan_prune(g, 0.0)
        pruned = apply_prune(g, plan)
        x = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
        a = graph_forward(g, x, mode="infer").output
        b = graph_forward(pruned, x, mode="infer").output
        np.testing.assert_array_equal(a, b)
        assert count_params(pruned) == count_params(g)

    @pytest.mark.parametrize("seed", range(6))
    def test_zeroed_channel_prunes_exactly(self, seed):
        g = uniform_alpha_graph(seed=seed)
        rng = np.random.default_rng(seed + 500)
        block = g.blocks[int(rng.integers(0, len(g.blocks)))]
        bn = g.node(middle_bn_id(g, block)).params
        victim = int(rng.integers(0, bn.channels))
        bn.alpha[victim] = 0.0
        bn.beta[victim] = 0.0
        plan = plan_prune(g, 0.0)
        mask = np.ones(bn.channels, dtype=bool)
        mask[victim] = False
        plan.keep_masks[middle_bn_id(g, block)] = mask
        pruned = apply_prune(g, plan)
        assert count_params(pruned) < count_params(g)
        x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
        a = graph_forward(g, x, mode="infer").output
        b = graph_forward(pruned, x, mode="infer").output
        rel = np.abs(a - b) / np.maximum(np.abs(a), 1e-3)
        assert rel.max() <= 1e-6

    def test_mismatched_plan_rejected(self):
        g = uniform_alpha_graph(seed=1)
        plan = plan_prune(g, 0.5)
        other = build_mini_resnet(blocks_per_stage=3, widths=(4, 8, 16))
        with pytest.raises(SurgeryError):
            apply_prune(other, plan)


def single_channel_candidate(seed=0, block_idx=1, widths=(4, 8, 16)):
    """Mini net pruned so block `block_idx` keeps one middle channel."""
    g = uniform_alpha_graph(seed=seed, widths=widths)
    for n in g.bn_nodes():
        n.params.alpha[...] = np.abs(n.params.alpha) + 0.5
    bn = g.node(middle_bn_id(g, g.blocks[block_idx])).params
    bn.alpha[...] = 1e-4
    bn.alpha[0] = 2.0  # survivor
    plan = plan_prune(g, 0.01)
    assert plan.fold_candidates == [g.blocks[block_idx].id]
    return apply_prune(g, plan)


class TestFoldZero:
    def test_identity_shortcut_block_becomes_wire(self):
        g = single_channel_candidate(block_idx=1)  # second stage-1 block: identity shortcut
        block = g.block_by_id(1)
        assert not block.projection
        folded, rec = fold_zero_init(g, 1)
        validate(folded)
        # zeroing the branch's last conv makes the branch contribute exactly 0,
        # so the folded graph must match bit for bit
        gz = g.clone()
        gz.node(gz.block_by_id(1).branch[-1]).params.weight.data[...] = 0.0
        x = np.random.default_rng(3).standard_normal((2, 3, 32, 32)).astype(np.float32)
        a = graph_forward(gz, x, mode="infer").output
        b = graph_forward(folded, x, mode="infer").output
        np.testing.assert_array_equal(a, b)
        assert rec.method == "zero"
        assert rec.new_node is None

    def test_projection_shortcut_block_becomes_projection(self):
        g = single_channel_candidate(block_idx=2)  # stage-2 opener: projection
        block = g.block_by_id(2)
        assert block.projection
        folded, _ = fold_zero_init(g, 2)
        validate(folded)
        gz = g.clone()
        gz.node(gz.block_by_id(2).branch[-1]).params.weight.data[...] = 0.0
        x = np.random.default_rng(4).standard_normal((2, 3, 32, 32)).astype(np.float32)
        a = graph_forward(gz, x, mode="infer").output
        b = graph_forward(folded, x, mode="infer").output
        np.testing.assert_array_equal(a, b)

    def test_param_delta_equals_deleted_elements(self):
        g = single_channel_candidate(block_idx=1)
        sizes = {}
        for n in g.nodes:
            if n.kind == "conv":
                sizes[n.id] = n.params.weight.data.size + (n.params.bias.size if n.params.bias is not None else 0)
            elif n.kind == "bn":
                sizes[n.id] = 2 * n.params.channels
            else:
                sizes[n.id] = 0
        folded, rec = fold_zero_init(g, 1)
        assert rec.param_delta == sum(sizes[nid] for nid in rec.removed_nodes)
        assert count_params(folded) == count_params(g) - rec.param_delta

    def test_non_candidate_rejected(self):
        g = uniform_alpha_graph(seed=2)
        with pytest.raises(SurgeryError):
            fold_zero_init(g, 0)


class TestFoldComposed:
    def test_one_by_one_composition_matches_hand_result(self):
        # conv1 maps 2 channels to 1 with weights [1, 2]; identity BN; conv2
        # scales by 3: the bridge must be the 1x1 kernel [3, 6]
        g = sandwich_graph(
            w1=np.array([[[[1.0]], [[2.0]]]]),
            bn=bn_params([1.0], eps=1e-12),
            w2=np.array([[[[3.0]]]]),
            proj=np.array([[[[1.0]], [[0.0]]]]),
        )
        folded, rec = fold_composed_init(g, 0)
        new = folded.node(rec.new_node).params
        np.testing.assert_allclose(new.weight.data.ravel(), [3.0, 6.0], rtol=1e-9)
        assert rec.kernel == (1, 1)
        x = positive_input(np.random.default_rng(0), 2, 2, 5)
        a = graph_forward(g, x, mode="infer").output
        b = graph_forward(folded, x, mode="infer").output
        np.testing.assert_allclose(a.data, b.data, rtol=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_positive_regime_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        k1, k2 = (1, 3) if seed % 2 == 0 else (3, 1)
        # half the cases have no BN constant (exact everywhere), half carry a
        # positive shift whose boundary truncation restricts us to the interior
        shift = 0.0 if seed % 4 < 2 else float(rng.uniform(0.1, 0.5))
        g = random_positive_sandwich(rng, k1=k1, k2=k2, in_ch=3, shift=shift)
        x = positive_input(rng, 2, 3, 12)
        mid = graph_forward(g, x, mode="infer").values[1]  # BN output, pre-ReLU
        assert (mid.data > 0).all(), "case not engineered into the positive regime"
        folded, rec = fold_composed_init(g, 0)
        a = graph_forward(g, x, mode="infer").output.data
        b = graph_forward(folded, x, mode="infer").output.data
        pad2 = (k2 - 1) // 2
        if shift == 0.0 and k1 == 1:
            region = (slice(None),) * 4  # exact everywhere
        else:
            m = k1 + k2
            region = (slice(None), slice(None), slice(m, -m), slice(m, -m))
        rel = np.abs(a - b)[region] / np.maximum(np.abs(a)[region], 1e-3)
        assert rel.max() <= 1e-5

    def test_positive_regime_with_shift_needs_interior(self):
        # k1 > 1 with a positive shift: boundary pixels see a truncated tap sum,
        # interior pixels are exact
        rng = np.random.default_rng(99)
        g = random_positive_sandwich(rng, k1=3, k2=3, in_ch=2, shift=0.4)
        x = positive_input(rng, 1, 2, 14)
        folded, _ = fold_composed_init(g, 0)
        a = graph_forward(g, x, mode="infer").output.data
        b = graph_forward(folded, x, mode="infer").output.data
        inner = (slice(None), slice(None), slice(6, -6), slice(6, -6))
        rel = np.abs(a - b)[inner] / np.maximum(np.abs(a)[inner], 1e-3)
        assert rel.max() <= 1e-5

    def test_zero_regime_matches_zero_fold(self):
        # strongly negative shift drives the middle activation below zero
        # everywhere: the branch emits exactly conv2(0) = 0, same as deletion.
        # A projection shortcut keeps the graph non-empty after deletion.
        rng = np.random.default_rng(7)
        w1 = rng.uniform(0.2, 1.0, size=(1, 3, 1, 1))
        bn = bn_params([0.3], beta=[-50.0])
        w2 = rng.standard_normal((3, 1, 3, 3))
        proj = rng.standard_normal((3, 3, 1, 1))
        g = sandwich_graph(w1, bn, w2, pad1=0, pad2=1, proj=proj)
        x = positive_input(rng, 2, 3, 8)
        mid = graph_forward(g, x, mode="infer").values[1]
        assert (mid.data <= 0).all()
        zeroed, _ = fold_zero_init(g, 0)
        a = graph_forward(g, x, mode="infer").output.data
        b = graph_forward(zeroed, x, mode="infer").output.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_alpha_zero_nonpositive_beta_reduces_to_zero_fold(self):
        rng = np.random.default_rng(8)
        w1 = rng.standard_normal((1, 3, 1, 1))
        w2 = rng.standard_normal((3, 1, 3, 3))
        proj = rng.standard_normal((3, 3, 1, 1))
        g = sandwich_graph(w1, bn_params([0.0], beta=[-0.25]), w2, pad1=0, pad2=1, proj=proj)
        folded, rec = fold_composed_init(g, 0)
        new = folded.node(rec.new_node).params
        assert not new.weight.data.any()
        assert not new.bias.any()
        x = np.random.default_rng(9).standard_normal((2, 3, 8, 8))
        zeroed, _ = fold_zero_init(g, 0)
        a = graph_forward(zeroed, x, mode="infer").output.data
        b = graph_forward(folded, x, mode="infer").output.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_strided_sandwich_rejected_with_directive(self):
        g = single_channel_candidate(block_idx=2)  # stage opener, strided 3x3
        with pytest.raises(SurgeryError, match="fold_zero_init"):
            fold_composed_init(g, 2)

    def test_fold_block_falls_back_to_zero_for_strided(self):
        g = single_channel_candidate(block_idx=2)
        folded, rec = surgery.fold_block(g, 2, "composed")
        assert rec.method == "zero"

    def test_paper_literal_keeps_center_tap(self):
        g = single_channel_candidate(block_idx=1)
        exact, rec_exact = fold_composed_init(g, 1)
        literal, rec_lit = fold_composed_init(g, 1, paper_literal=True)
        assert rec_exact.kernel == (3, 3)
        assert rec_lit.kernel == (1, 1)
        w_exact = exact.node(rec_exact.new_node).params.weight.data
        w_lit = literal.node(rec_lit.new_node).params.weight.data
        np.testing.assert_allclose(w_lit[:, :, 0, 0], w_exact[:, :, 1, 1], rtol=1e-6)

    def test_bookkeeping_exact(self):
        g = single_channel_candidate(block_idx=1)
        before = count_params(g)
        folded, rec = fold_composed_init(g, 1)
        assert count_params(folded) == before - rec.param_delta

    def test_fold_inside_full_model_is_equivalent_in_linear_regime(self):
        # engineer the surviving channel of a real block into the non-negative
        # regime with no BN constant: positive conv1 row over ReLU-ed features
        # gives pre-ReLU >= 0, and c0 = 0 leaves no boundary bias either, so
        # the whole model output must match
        g = single_channel_candidate(block_idx=1)
        block = g.block_by_id(1)
        conv1 = g.node(block.branch[2])
        conv1.params.weight.data[...] = np.abs(conv1.params.weight.data) + 0.05
        bn = g.node(middle_bn_id(g, block)).params
        bn.beta[...] = 0.0
        bn.running_mean[...] = 0.0
        bn.running_var[...] = 1.0
        x = np.abs(np.random.default_rng(11).standard_normal((2, 3, 32, 32))).astype(np.float32)
        acts = graph_forward(g, x, mode="infer")
        assert (acts.values[middle_bn_id(g, block)].data >= 0).all()
        folded, _ = fold_composed_init(g, 1)
        a = acts.output  # fc logits, a plain array
        b = graph_forward(folded, x, mode="infer").output
        rel = np.abs(a - b) / np.maximum(np.abs(a), 1e-3)
        assert rel.max() <= 1e-5
