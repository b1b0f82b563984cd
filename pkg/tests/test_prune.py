import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from litedet import (GraphError, PruneError, PrunePlan, WeightStore, apply_prune,
                     build_coupling_groups, channel_importance, forward_graph, graph_cost,
                     init_weights, lamp_scores, load_fixture, load_graph, search_speedup,
                     select_channels)
from litedet.graph import output_tensors
from litedet.prune import Pruner
from litedet.tensor import ConvParams, conv2d, silu

from conftest import rand_tensor

finite = st.floats(-10, 10, allow_nan=False, width=32)


def graph(nodes, outputs, c=2, hw=8):
    return load_graph(json.dumps({"meta": {"input_shape": [1, c, hw, hw]},
                                  "nodes": [{"id": "x", "kind": "input"}] + nodes,
                                  "outputs": outputs}))


def conv(nid, src, c_in, c_out, k=1, **kw):
    return {"id": nid, "kind": "conv", "inputs": [src],
            "attrs": dict(c_in=c_in, c_out=c_out, k=k, **kw)}


def two_layer():
    return graph([conv("a", "x", 2, 3, 3), conv("b", "a", 3, 2)], ["b"])


class TestLampScores:
    def test_examples(self):
        np.testing.assert_allclose(lamp_scores([1, 2, 3]), [1 / 14, 4 / 13, 1], rtol=1e-15)
        np.testing.assert_allclose(lamp_scores([-2.5] * 4), [1 / 4, 1 / 3, 1 / 2, 1], rtol=1e-15)
        np.testing.assert_allclose(lamp_scores([3, -1, 2]), [1, 1 / 14, 4 / 13], rtol=1e-15)

    def test_all_zero_flagged(self):
        scores, flag = lamp_scores(np.zeros((2, 3)), return_flag=True)
        np.testing.assert_array_equal(scores, 0)
        assert flag
        assert lamp_scores([0, 1], return_flag=True)[1] is False

    @pytest.mark.parametrize("bad", [[], [1.0, np.nan]])
    def test_rejects(self, bad):
        with pytest.raises(PruneError):
            lamp_scores(bad)

    @settings(max_examples=100)
    @given(arrays(np.float64, st.integers(1, 60), elements=finite))
    def test_magnitude_order(self, w):
        sc = lamp_scores(w)
        bigger = np.abs(w)[:, None] > np.abs(w)[None, :]
        assert np.all((sc[:, None] > sc[None, :]) | ~bigger)

    @settings(max_examples=100)
    @given(arrays(np.float64, st.integers(1, 60), elements=finite), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, w, alpha):
        np.testing.assert_allclose(lamp_scores(alpha * w), lamp_scores(w), rtol=1e-9, atol=1e-12)

    @given(arrays(np.float64, st.integers(1, 60), elements=finite.filter(lambda v: v != 0)))
    def test_largest_scores_one(self, w):
        assert lamp_scores(w).max() == 1.0
        assert np.all((lamp_scores(w) > 0) & (lamp_scores(w) <= 1))


class TestChannelImportance:
    def test_zero_channel_is_zero(self, rng):
        w = rng.standard_normal((2, 3, 3, 3))
        w[0] = 0
        sc = channel_importance("n", w)
        assert sc[0].importance == 0 and sc[1].importance > 0
        assert [s.channel for s in sc] == [0, 1] and sc[0].node == "n"

    def test_single_channel(self, rng):
        assert len(channel_importance("n", rng.standard_normal((1, 4, 1, 1)))) == 1

    def test_identical_multisets(self, rng):
        row = rng.standard_normal(12)
        w = np.stack([row, rng.permutation(row), 3 * rng.standard_normal(12)]).reshape(3, 3, 2, 2)
        sc = channel_importance("n", w)
        assert abs(sc[0].importance - sc[1].importance) < 1e-12

    def test_mean_ties(self):
        np.testing.assert_allclose(lamp_scores([2.0] * 4, ties="mean"), [25 / 48] * 4)
        np.testing.assert_allclose(lamp_scores([1, 2, 3], ties="mean"), [1 / 14, 4 / 13, 1])


class TestCouplingGroups:
    def test_none_without_adds(self):
        assert build_coupling_groups(two_layer()) == []

    def test_faster_block_residual(self):
        g = graph([conv("c0", "x", 2, 8), {"id": "fb", "kind": "faster_block", "inputs": ["c0"],
                                          "attrs": {"c": 8}}], ["fb"])
        groups = build_coupling_groups(g)
        names = [{n for n, _ in grp.members} for grp in groups]
        assert {"c0", "fb.fuse"} in names
        assert all(len(set(len(ix) for _, ix in grp.members)) == 1 for grp in groups)

    def test_ghost_hg_skip(self):
        g = graph([conv("c0", "x", 2, 8), {"id": "hg", "kind": "ghost_hg", "inputs": ["c0"],
                                          "attrs": {"c": 8, "widths": [4, 4, 4]}}], ["hg"])
        groups = build_coupling_groups(g)
        assert any({"c0", "hg.fuse"} <= {n for n, _ in grp.members} for grp in groups)

    def test_depthwise_couples_to_producer(self):
        g = graph([conv("c0", "x", 2, 4), conv("dw", "c0", 4, 4, 3, g=4)], ["dw"])
        (grp,) = build_coupling_groups(g)
        assert {n for n, _ in grp.members} == {"c0", "dw"} and grp.width == 4

    def test_fixture_groups_consistent(self):
        for name in ("improved-lite", "baseline-lite"):
            for grp in build_coupling_groups(load_fixture(name)):
                assert len({len(ix) for _, ix in grp.members}) == 1


class TestSelectChannels:
    def test_zero_sparsity_identity(self):
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        plan = select_channels(g, w, 0.0)
        assert plan.is_identity and plan.achieved_sparsity == 0 and plan.achieved_mac_ratio == 1
        g2, w2 = apply_prune(g, w, plan)
        assert g2.to_json() == g.to_json() and w2.to_bytes() == w.to_bytes()

    @pytest.mark.parametrize("s", [-0.1, 1.0, 1.5])
    def test_bad_sparsity(self, s):
        g = two_layer()
        with pytest.raises(PruneError):
            select_channels(g, init_weights(g, 0), s)

    def test_zero_channel_goes_first(self):
        g = two_layer()
        arrays = init_weights(g, 3).arrays()
        arrays["a.weight"] = arrays["a.weight"].copy()
        arrays["a.weight"][1] = 0
        w = WeightStore.from_arrays(arrays)
        plan = select_channels(g, w, 0.01)
        assert plan.masks["a"] == (True, False, True)
        assert plan.masks["b"] == (True, True)

    def test_reduced_net_oracle(self, rng):
        g = two_layer()
        arrays = {k: v.copy() for k, v in init_weights(g, 3).arrays().items()}
        arrays["a.weight"][1] = 0
        arrays["a.bias"][:] = [0.1, 0.0, -0.2]
        w = WeightStore.from_arrays(arrays)
        g2, w2 = apply_prune(g, w, select_channels(g, w, 0.01))
        assert w2.get("b.weight").shape == (2, 2, 1, 1)
        x = rand_tensor(rng, (1, 2, 8, 8))
        keep = [0, 2]
        h = silu(conv2d(x, ConvParams(arrays["a.weight"][keep], arrays["a.bias"][keep], padding=1)))
        want = silu(conv2d(h, ConvParams(arrays["b.weight"][:, keep], arrays["b.bias"])))
        assert forward_graph(g2, w2, x)["b"].bit_equal(want)

    def test_fixture_half_sparsity(self):
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        g2, _ = apply_prune(g, w, select_channels(g, w, 0.5))
        removed = 1 - graph_cost(g2).total_params / graph_cost(g).total_params
        assert 0.45 <= removed <= 0.55

    def test_unreachable_sparsity_warns(self):
        g = two_layer()
        plan = select_channels(g, init_weights(g, 0), 0.99)
        assert plan.warning and plan.achieved_sparsity < 0.99
        assert sum(plan.masks["a"]) == 1

    def test_protected_node_kept(self):
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        plan = select_channels(g, w, 0.5, protected=["neck_c2"])
        assert all(all(m) for k, m in plan.masks.items() if k.startswith("neck_c2."))
        heads = [m for k, m in plan.masks.items() if k.startswith("head.")
                 and k.split(".")[-1] in ("cls", "box", "gconv1", "gconv2")]
        assert heads and all(all(m) for m in heads)


def _random_plans(n):
    for i in range(n):
        name = ("improved-lite", "baseline-lite")[i % 2]
        g = load_fixture(name)
        w = init_weights(g, 100 + i)
        s = float(np.random.default_rng(i).uniform(0, 0.95))
        yield g, w, select_channels(g, w, s)


class TestApplyPrune:
    def test_random_plans_forward(self):
        x = rand_tensor(np.random.default_rng(0), (1, 3, 64, 64))
        for g, w, plan in _random_plans(50):
            g2, w2 = apply_prune(g, w, plan)
            out = output_tensors(g2, forward_graph(g2, w2, x))
            ref = output_tensors(g, forward_graph(g, w, x))
            assert {k: v.shape for k, v in out.items()} == {k: v.shape for k, v in ref.items()}
            assert graph_cost(g2).total_macs * plan.achieved_mac_ratio == pytest.approx(
                graph_cost(g).total_macs, rel=1e-12)

    def test_stale_plan(self):
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        plan = select_channels(g, w, 0.3)
        with pytest.raises(PruneError, match="stale"):
            apply_prune(g, init_weights(g, 1), plan)
        with pytest.raises(PruneError, match="stale"):
            apply_prune(load_fixture("baseline-lite"), w, plan)
        d = plan.to_dict()
        d["graph_digest"], d["weights_checksum"] = "", None
        d["masks"]["b2.fuse"] = d["masks"]["b2.fuse"][:-1]
        with pytest.raises(PruneError, match="stale"):
            apply_prune(g, w, PrunePlan.from_dict(d))

    def test_broken_coupling_rejected(self):
        g = graph([conv("c0", "x", 2, 8), {"id": "fb", "kind": "faster_block", "inputs": ["c0"],
                                          "attrs": {"c": 8}}, conv("o", "fb", 8, 2)], ["o"])
        w = init_weights(g, 0)
        plan = select_channels(g, w, 0.0)
        plan.masks["c0"] = (False,) + plan.masks["c0"][1:]
        with pytest.raises(PruneError, match="coupling"):
            apply_prune(g, w, plan)

    def test_plan_json_round_trip(self):
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        plan = select_channels(g, w, 0.4)
        back = PrunePlan.from_json(plan.to_json())
        assert back == plan
        with pytest.raises(PruneError):
            PrunePlan.from_json("{")


class TestSearchSpeedup:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup():
        g = load_fixture("improved-lite")
        w = init_weights(g, 0)
        return g, w, Pruner(g, w)

    def test_identity_at_one(self, setup):
        g, w, pr = setup
        assert search_speedup(g, w, 1.0, pruner=pr).is_identity

    def test_below_one_rejected(self, setup):
        g, w, pr = setup
        with pytest.raises(PruneError):
            search_speedup(g, w, 0.9, pruner=pr)

    @pytest.mark.parametrize("target", [1.5, 2.0, 2.5, 3.0])
    def test_hits_target(self, setup, target):
        g, w, pr = setup
        plan = search_speedup(g, w, target, 0.02, pruner=pr)
        assert abs(plan.achieved_mac_ratio - target) <= 0.02 * target and plan.warning is None
        g2, _ = apply_prune(g, w, plan)
        assert graph_cost(g).total_macs / graph_cost(g2).total_macs == pytest.approx(
            plan.achieved_mac_ratio, rel=1e-12)

    def test_unreachable_warns(self, setup):
        g, w, pr = setup
        plan = search_speedup(g, w, 1000.0, pruner=pr)
        assert plan.warning and "closest" in plan.warning

    def test_monotone_in_sparsity(self, setup):
        g, w, pr = setup
        ratios = [select_channels(g, w, s, pruner=pr).achieved_mac_ratio
                  for s in np.linspace(0, 0.95, 40)]
        assert all(b >= a for a, b in zip(ratios, ratios[1:]))
        masks = [select_channels(g, w, s, pruner=pr).masks for s in (0.2, 0.6)]
        for k in masks[0]:
            assert all(m0 or not m1 for m0, m1 in zip(masks[0][k], masks[1][k]))


def test_graph_error_on_mangled_fixture():
    with pytest.raises(GraphError):
        load_graph('{"nodes": [{"id": "x", "kind": "input"}, {"id": "a", "kind": "conv"}]}')
