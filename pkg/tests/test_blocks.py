from types import SimpleNamespace

import numpy as np
import pytest

from litedet import ConfigError, ConvParams, ShapeError, Tensor4, build_block, param_count
from litedet.blocks import (C2fBlock, FasterBlock, GhostConvBlock, baseline_forward, describe,
                            ghost_hgblock_forward, pconv_partial, seeded_params, zero_params)
from litedet.cost import layer_cost
from litedet.graph import Node
from litedet.tensor import concat_channels, conv2d, silu
from litedet.trace import conv_macs

from conftest import rand_tensor


def with_zeroed(*paths):
    """Provider returning seeded weights except for the named subs, zeroed."""
    seeded = seeded_params(7)

    def provide(spec):
        p = seeded(spec)
        if spec.sub in paths:
            return zero_params(spec)
        return p
    return provide


def analyzer_params(kind, attrs, in_shape):
    return layer_cost(Node("n", kind, attrs, ("x",)), in_shape).params


class TestGhostConv:
    def test_shape_and_params(self, rng):
        b = build_block("ghost_conv", {"c_in": 4, "c_out": 8, "k": 1}, seeded_params(1))
        assert b.forward(rand_tensor(rng, (1, 4, 8, 8))).shape == (1, 8, 8, 8)
        assert param_count(b) == 124
        assert param_count(b.primary) == 20 and param_count(b.cheap) == 104

    def test_zero_weights_give_zero(self, rng):
        b = build_block("ghost_conv", {"c_in": 4, "c_out": 8})
        np.testing.assert_array_equal(b.forward(rand_tensor(rng, (1, 4, 5, 5))).data, 0)

    def test_odd_out_rejected(self):
        with pytest.raises(ConfigError):
            build_block("ghost_conv", {"c_in": 4, "c_out": 7})

    def test_halves_are_primary_and_cheap(self, rng):
        b = build_block("ghost_conv", {"c_in": 3, "c_out": 6, "k": 3}, seeded_params(2))
        x = rand_tensor(rng, (1, 3, 6, 6))
        y = b.forward(x).data
        p = silu(conv2d(x, b.primary))
        np.testing.assert_array_equal(y[:, :3], p.data)
        np.testing.assert_array_equal(y[:, 3:], silu(conv2d(p, b.cheap)).data)

    def test_channel_mismatch(self, rng):
        b = build_block("ghost_conv", {"c_in": 4, "c_out": 8})
        with pytest.raises(ShapeError):
            b.forward(rand_tensor(rng, (1, 5, 4, 4)))


class TestGhostHG:
    def test_shape(self, rng):
        b = build_block("ghost_hg", {"c": 16}, seeded_params(3))
        assert b.forward(rand_tensor(rng, (1, 16, 8, 8))).shape == (1, 16, 8, 8)
        assert b.fuse.c_in == 48

    def test_zero_fuse_is_identity(self, rng):
        a = {"c": 8}
        b = build_block("ghost_hg", a, with_zeroed("fuse"))
        x = rand_tensor(rng, (2, 8, 6, 6))
        assert b.forward(x).bit_equal(x)

    def test_identity_stub_ghosts(self, rng):
        real = build_block("ghost_hg", {"c": 4, "widths": [4, 4, 4]}, seeded_params(4))
        stub = SimpleNamespace(forward=lambda t: t)
        double = SimpleNamespace(c=4, ghost1=stub, ghost2=stub, ghost3=stub, fuse=real.fuse)
        x = rand_tensor(rng, (1, 4, 5, 5))
        want = silu(conv2d(concat_channels([x, x, x]), real.fuse)).data + x.data
        np.testing.assert_array_equal(ghost_hgblock_forward(x, double).data, want)

    def test_mismatch(self, rng):
        b = build_block("ghost_hg", {"c": 8})
        with pytest.raises(ShapeError):
            b.forward(rand_tensor(rng, (1, 6, 4, 4)))


class TestHGStem:
    def test_shape(self, rng):
        b = build_block("hgstem", {"c_in": 3, "c_mid": 16, "c_out": 32}, seeded_params(5))
        assert b.forward(rand_tensor(rng, (1, 3, 64, 64))).shape == (1, 32, 16, 16)

    def test_zero_weights(self, rng):
        b = build_block("hgstem", {"c_in": 3, "c_mid": 8, "c_out": 8})
        np.testing.assert_array_equal(b.forward(rand_tensor(rng, (1, 3, 16, 16))).data, 0)

    def test_indivisible(self, rng):
        b = build_block("hgstem", {"c_in": 3, "c_mid": 8, "c_out": 8})
        with pytest.raises(ShapeError):
            b.forward(rand_tensor(rng, (1, 3, 18, 16)))

    def test_depthwise_identity_preserves_constant(self):
        k = np.zeros((4, 1, 5, 5), np.float32)
        k[:, 0, 2, 2] = 1
        y = conv2d(Tensor4.full((1, 4, 7, 7), 1.5), ConvParams(k, padding=2, groups=4))
        np.testing.assert_array_equal(y.data, 1.5)


class TestFasterBlock:
    def test_zero_fuse_identity(self, rng):
        b = build_block("faster_block", {"c": 8}, with_zeroed("fuse"))
        x = rand_tensor(rng, (1, 8, 4, 4))
        assert b.forward(x).bit_equal(x)

    def test_pass_through_slice(self, rng):
        b = build_block("faster_block", {"c": 8}, seeded_params(6))
        x = rand_tensor(rng, (1, 8, 4, 4))
        y = pconv_partial(x, b)
        assert b.cp_in == 2
        np.testing.assert_array_equal(y.data[:, 2:], x.data[:, 2:])
        assert not np.array_equal(y.data[:, :2], x.data[:, :2])

    def test_pconv_mac_ratio(self):
        shape = (1, 16, 10, 10)
        fb = layer_cost(Node("n", "faster_block", {"c": 16}, ("x",)), shape).macs
        fuse = conv_macs(16, 16, (1, 1), 1, 100)
        full = layer_cost(Node("n", "conv", {"c_in": 16, "c_out": 16, "k": 3}, ("x",)), shape).macs
        assert 16 * (fb - fuse) == full
        assert analyzer_params("faster_block", {"c": 16}, shape) == param_count(
            build_block("faster_block", {"c": 16}))

    def test_small_width_rejected(self):
        with pytest.raises(ConfigError):
            build_block("faster_block", {"c": 3})


class TestC2f:
    def test_faster_shape(self, rng):
        b = build_block("c2f_faster", {"c_in": 32, "c_out": 32, "n": 2}, seeded_params(8))
        assert b.split == (16, 16)
        assert b.forward(rand_tensor(rng, (1, 32, 8, 8))).shape == (1, 32, 8, 8)

    def test_faster_reduction(self, rng):
        b = build_block("c2f_faster", {"c_in": 8, "c_out": 8, "n": 1},
                        with_zeroed("blocks.0.fuse"))
        x = rand_tensor(rng, (1, 8, 4, 4))
        t = silu(conv2d(x, b.entry)).data
        s1, s2 = Tensor4(t[:, :4]), Tensor4(t[:, 4:])
        want = silu(conv2d(concat_channels([s2, s1]), b.exit))
        assert b.forward(x).bit_equal(want)

    def test_literal_variant_reuses_first_half(self, rng):
        b = build_block("c2f_faster", {"c_in": 8, "c_out": 8, "literal_concat": True},
                        with_zeroed("blocks.0.fuse"))
        x = rand_tensor(rng, (1, 8, 4, 4))
        t = silu(conv2d(x, b.entry)).data
        want = silu(conv2d(Tensor4(np.concatenate([t[:, :4], t[:, :4]], 1)), b.exit))
        assert b.forward(x).bit_equal(want)

    def test_zero_exit(self, rng):
        b = build_block("c2f_faster", {"c_in": 8, "c_out": 8}, with_zeroed("exit"))
        np.testing.assert_array_equal(b.forward(rand_tensor(rng, (1, 8, 4, 4))).data, 0)

    def test_baseline_zero_bottleneck(self, rng):
        zeroed = ("blocks.0.cv1", "blocks.0.cv2")
        b = build_block("c2f", {"c_in": 8, "c_out": 8}, with_zeroed(*zeroed))
        assert isinstance(b, C2fBlock)
        x = rand_tensor(rng, (1, 8, 4, 4))
        t = silu(conv2d(x, b.entry)).data
        want = silu(conv2d(Tensor4(np.concatenate([t[:, 4:], t[:, :4]], 1)), b.exit))
        assert baseline_forward(x, b).bit_equal(want)

    def test_baseline_mirrors_faster_channels(self):
        a = describe("c2f", {"c_in": 32, "c_out": 32, "n": 2})
        f = describe("c2f_faster", {"c_in": 32, "c_out": 32, "n": 2})
        ends = lambda d: [(c["c_in"], c["c_out"]) for c in d["convs"] if c["sub"] in ("entry", "exit")]
        assert ends(a) == ends(f)


class TestSPPF:
    def test_constant_input(self):
        b = build_block("sppf", {"c_in": 4, "c_out": 4, "c_mid": 4})
        w1 = np.eye(4, dtype=np.float32)[:, :, None, None]
        w2 = np.zeros((4, 16, 1, 1), np.float32)
        w2[np.arange(4), np.arange(4)] = 1
        b = type(b)(ConvParams(w1, np.zeros(4)), ConvParams(w2, np.zeros(4)))
        y = b.forward(Tensor4.full((1, 4, 9, 9), 2.0)).data
        once = 2.0 / (1 + np.exp(-2.0))
        assert np.ptp(y) == 0
        np.testing.assert_allclose(y[0, 0, 0, 0], once / (1 + np.exp(-once)), rtol=1e-6)


class TestHeads:
    FEATS = [(1, 64, 20, 20), (1, 128, 10, 10), (1, 256, 5, 5)]

    def test_gcdetect_shapes(self, rng):
        h = build_block("gcdetect", {"c_in": [64, 128, 256], "w": 64, "num_classes": 6},
                        seeded_params(9))
        outs = h.forward(*[rand_tensor(rng, s) for s in self.FEATS])
        for (cls, box), s in zip(outs, self.FEATS):
            assert cls.shape == (1, 6) + s[2:] and box.shape == (1, 4) + s[2:]

    def test_head_width_must_divide(self):
        with pytest.raises(ConfigError):
            build_block("gcdetect", {"c_in": [8], "w": 40, "num_classes": 2})

    def test_gconv_param_ratio(self):
        d = describe("gcdetect", {"c_in": [64], "w": 64, "num_classes": 6})
        g = next(c for c in d["convs"] if c["sub"] == "p0.gconv1")
        assert 3 * 3 * (g["c_in"] // g["groups"]) * g["c_out"] == 2304
        assert 3 * 3 * 64 * 64 == 16 * 2304

    def test_group1_equals_dense_oracle(self, rng):
        a = {"c_in": [8, 16], "w": 16, "num_classes": 3, "groups": 1}
        h = build_block("gcdetect", a, seeded_params(10))
        feats = [rand_tensor(rng, (1, 8, 6, 6)), rand_tensor(rng, (1, 16, 3, 3))]
        for x, s, (cls, box) in zip(feats, h.scales, h.forward(*feats)):
            t = x.data.astype(np.float64)
            for p in (s.align, s.gconv1, s.gconv2):
                t = _dense_conv(t, p)
                t = t / (1 + np.exp(-t))
            assert np.max(np.abs(cls.data - _dense_conv(t, s.cls_out))) < 1e-6
            assert np.max(np.abs(box.data - _dense_conv(t, s.box_out))) < 1e-6

    def test_trunk_shared_outputs_independent(self, rng):
        a = {"c_in": [16], "w": 16, "num_classes": 3}
        h = build_block("gcdetect", a, seeded_params(11))
        x = rand_tensor(rng, (1, 16, 4, 4))
        (cls, box), = h.forward(x)
        s = h.scales[0]
        bumped = ConvParams(s.cls_out.weight * 3, s.cls_out.bias)
        h2 = type(h)((type(s)(s.align, s.gconv1, s.gconv2, bumped, s.box_out),))
        (cls2, box2), = h2.forward(x)
        assert box2.bit_equal(box) and not cls2.bit_equal(cls)

    def test_plain_head_bigger(self):
        a = {"c_in": [32, 48, 64], "w": 48, "num_classes": 6}
        plain = param_count(build_block("plain_head", a))
        gc = param_count(build_block("gcdetect", a))
        assert plain > gc


def _dense_conv(x, p):
    """float64 oracle for a dense conv with 'same' padding and stride 1."""
    w = p.weight.astype(np.float64)
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, wd = x.shape
    out = np.zeros((n, w.shape[0], h, wd))
    for i in range(k):
        for j in range(k):
            out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + wd], w[:, :, i, j])
    return out + p.bias.astype(np.float64)[None, :, None, None]


@pytest.mark.parametrize("kind,attrs,shape", [
    ("conv", {"c_in": 3, "c_out": 8, "k": 3, "s": 2}, (1, 3, 16, 16)),
    ("ghost_conv", {"c_in": 4, "c_out": 8, "k": 3}, (1, 4, 8, 8)),
    ("ghost_hg", {"c": 16, "widths": [8, 8, 16]}, (1, 16, 8, 8)),
    ("hgstem", {"c_in": 3, "c_mid": 16, "c_out": 32}, (1, 3, 32, 32)),
    ("faster_block", {"c": 12}, (1, 12, 4, 4)),
    ("c2f_faster", {"c_in": 16, "c_out": 24, "n": 2}, (1, 16, 8, 8)),
    ("c2f", {"c_in": 16, "c_out": 24, "n": 2}, (1, 16, 8, 8)),
    ("sppf", {"c_in": 16, "c_out": 16}, (1, 16, 8, 8)),
])
def test_analyzer_params_equal_enumeration(kind, attrs, shape):
    b = build_block(kind, attrs)
    assert analyzer_params(kind, attrs, shape) == param_count(b)


@pytest.mark.parametrize("kind", ["gcdetect", "plain_head"])
def test_head_analyzer_params_equal_enumeration(kind):
    a = {"c_in": [16, 32], "w": 16, "num_classes": 4}
    shapes = [(1, 16, 8, 8), (1, 32, 4, 4)]
    assert analyzer_params(kind, a, shapes) == param_count(build_block(kind, a))


def test_grouped_ratio_is_exactly_g():
    for g in (1, 2, 4, 8, 16):
        d = describe("conv", {"c_in": 32, "c_out": 64, "k": 3, "g": g})
        dense = analyzer_params("conv", {"c_in": 32, "c_out": 64, "k": 3}, (1, 32, 4, 4)) - 64
        grouped = analyzer_params("conv", {"c_in": 32, "c_out": 64, "k": 3, "g": g}, (1, 32, 4, 4)) - 64
        assert dense == g * grouped and d["convs"][0]["groups"] == g


def test_unknown_kind():
    with pytest.raises(ConfigError):
        build_block("transformer", {})


def test_ghost_block_type():
    assert isinstance(build_block("ghost_conv", {"c_in": 2, "c_out": 2}), GhostConvBlock)
    assert isinstance(build_block("faster_block", {"c": 4}), FasterBlock)
