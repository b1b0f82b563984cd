"""Detector building blocks and the baselines they replace.

Every block kind is a small class that knows four things about itself:
how to normalize a JSON attr dict into its explicit form, which convolutions
it declares (``conv_specs``), how to assemble an instance from a parameter
provider, and how to rewrite its attrs after channel pruning (``rebuild``).
Forward passes are plain module-level functions.

SiLU follows every convolution except the classification and box outputs
of detection heads. Batch-norm is assumed folded into conv weight and bias.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import SplitMix64
from .tensor import (ConvParams, add, concat_channels, conv2d, maxpool2d, silu,
                     split_channels, upsample_nearest2x)


@dataclass(frozen=True)
class ConvSpec:
    """Declaration of one convolution inside a block."""

    sub: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    pad: Optional[int] = None
    groups: int = 1
    bias: bool = True

    @property
    def padding(self):
        return self.k // 2 if self.pad is None else self.pad

    @property
    def weight_shape(self):
        return (self.c_out, self.c_in // self.groups, self.k, self.k)

    @property
    def fan_in(self):
        return (self.c_in // self.groups) * self.k * self.k

    def params(self, weight, bias=None, name=""):
        return ConvParams(weight=weight, bias=bias if self.bias else None,
                          stride=self.stride, padding=self.padding,
                          groups=self.groups, name=name)


Provider = Callable[[ConvSpec], ConvParams]


def zero_params(spec):
    w = np.zeros(spec.weight_shape, dtype=np.float32)
    b = np.zeros(spec.c_out, dtype=np.float32) if spec.bias else None
    return spec.params(w, b, name=spec.sub)


def uniform_weight(rng, spec):
    """Draw a weight tensor uniform in +-1/sqrt(fan_in), row-major order."""
    bound = 1.0 / math.sqrt(spec.fan_in)
    u = rng.random_array(int(np.prod(spec.weight_shape)))
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(spec.weight_shape)


def seeded_params(seed):
    """Provider drawing weights from one SplitMix64 stream; biases zero."""
    rng = SplitMix64(seed)

    def provide(spec):
        b = np.zeros(spec.c_out, dtype=np.float32) if spec.bias else None
        return spec.params(uniform_weight(rng, spec), b, name=spec.sub)
    return provide


def _cba(x, p, act=True):
    y = conv2d(x, p)
    return silu(y) if act else y


def _req(attrs, key, kind):
    if key not in attrs:
        raise ConfigError(f"{kind}: missing attribute '{key}'")
    return attrs[key]


def _pos_int(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{what} must be a positive integer, got {value!r}")
    return int(value)


class BlockKind:
    """Registry base. Subclasses set ``kind`` and override as needed."""

    kind = ""
    registry = {}

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.__dict__.get("kind"):
            BlockKind.registry[cls.kind] = cls

    @classmethod
    def normalize(cls, attrs):
        return dict(attrs)

    @classmethod
    def in_channels(cls, a):
        """Declared input widths, or None when the kind adapts to its inputs."""
        return None

    @classmethod
    def out_channels(cls, a, in_chs):
        return in_chs[0]

    @classmethod
    def num_inputs(cls, a):
        return 1

    @classmethod
    def conv_specs(cls, a, prefix=""):
        return []

    @classmethod
    def build(cls, a, provider, prefix=""):
        return cls()

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a)

    @classmethod
    def protected_subs(cls, a):
        return ()


def block_kind(kind):
    try:
        return BlockKind.registry[kind]
    except KeyError:
        raise ConfigError(f"unknown block kind {kind!r}") from None


def build_block(kind, attrs, provider=zero_params):
    cls = block_kind(kind)
    return cls.build(cls.normalize(attrs), provider)


# -- parameter-free graph plumbing ---------------------------------------

class Input(BlockKind):
    """The graph input; ``c`` defaults to meta.input_shape's channels."""

    kind = "input"

    @classmethod
    def normalize(cls, attrs):
        return {"c": _pos_int(attrs["c"], "input.c")} if "c" in attrs else {}

    @classmethod
    def num_inputs(cls, a):
        return 0


class Identity(BlockKind):
    kind = "identity"

    def forward(self, x):
        return x


class Concat(BlockKind):
    kind = "concat"

    @classmethod
    def num_inputs(cls, a):
        return None

    @classmethod
    def out_channels(cls, a, in_chs):
        return sum(in_chs)

    def forward(self, *xs):
        return concat_channels(list(xs))


class Upsample(BlockKind):
    kind = "upsample"

    def forward(self, x):
        return upsample_nearest2x(x)


class Add(BlockKind):
    kind = "add"

    @classmethod
    def num_inputs(cls, a):
        return 2

    def forward(self, a, b):
        return add(a, b)


class MaxPool(BlockKind):
    kind = "maxpool"

    def __init__(self, k=2, s=2, p=0):
        self.k, self.s, self.p = k, s, p

    @classmethod
    def normalize(cls, attrs):
        return {"k": int(attrs.get("k", 2)), "s": int(attrs.get("s", attrs.get("k", 2))),
                "p": int(attrs.get("p", 0))}

    @classmethod
    def build(cls, a, provider, prefix=""):
        return cls(a["k"], a["s"], a["p"])

    def forward(self, x):
        return maxpool2d(x, self.k, self.s, self.p)


# -- ConvBNAct --------------------------------------------------------------

def conv_bn_act_forward(x, b):
    return _cba(x, b.conv, b.act)


@dataclass(frozen=True, eq=False)
class ConvBNAct(BlockKind):
    conv: ConvParams
    act: bool = True
    kind = "conv"

    def forward(self, x):
        return conv_bn_act_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        k = _pos_int(attrs.get("k", 3), "conv.k")
        a = {"c_in": _pos_int(_req(attrs, "c_in", "conv"), "conv.c_in"),
             "c_out": _pos_int(_req(attrs, "c_out", "conv"), "conv.c_out"),
             "k": k, "s": _pos_int(attrs.get("s", 1), "conv.s"),
             "p": int(attrs.get("p", k // 2)), "g": _pos_int(attrs.get("g", 1), "conv.g"),
             "act": bool(attrs.get("act", True))}
        if a["c_in"] % a["g"] or a["c_out"] % a["g"]:
            raise ConfigError(f"conv: groups={a['g']} must divide c_in={a['c_in']} and c_out={a['c_out']}")
        return a

    @classmethod
    def in_channels(cls, a):
        return [a["c_in"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c_out"]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        return [ConvSpec(prefix, a["c_in"], a["c_out"], a["k"], a["s"], a["p"], a["g"])]

    @classmethod
    def build(cls, a, provider, prefix=""):
        return cls(provider(cls.conv_specs(a, prefix)[0]), a["act"])

    @classmethod
    def rebuild(cls, a, kept):
        a = dict(a)
        depthwise = a["g"] > 1 and a["g"] == a["c_in"] == a["c_out"]
        c_in = kept.inp(0)
        if depthwise:
            a.update(c_in=c_in, c_out=c_in, g=c_in)
        elif a["g"] == 1:
            a.update(c_in=c_in, c_out=kept.out(""))
        return a


# -- GhostConv ------------------------------------------------------------------

def ghost_conv_forward(x, b):
    """Primary conv to half the channels, cheap depthwise 5x5 for the rest."""
    if x.shape[1] != b.c_in:
        raise ShapeError(f"ghost_conv: input has {x.shape[1]} channels, block expects {b.c_in}",
                         dim="c", expected=b.c_in, actual=x.shape[1])
    y = _cba(x, b.primary, b.act)
    return concat_channels([y, _cba(y, b.cheap, b.act)])


@dataclass(frozen=True, eq=False)
class GhostConvBlock(BlockKind):
    primary: ConvParams
    cheap: ConvParams
    act: bool = True
    kind = "ghost_conv"

    def __post_init__(self):
        h = self.primary.c_out
        if not (self.cheap.groups == self.cheap.c_in == self.cheap.c_out == h):
            raise ConfigError(f"ghost_conv: cheap op must be depthwise over {h} channels")

    c_in = property(lambda self: self.primary.c_in)
    c_out = property(lambda self: 2 * self.primary.c_out)
    def forward(self, x):
        return ghost_conv_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        c_out = _pos_int(_req(attrs, "c_out", "ghost_conv"), "ghost_conv.c_out")
        if c_out % 2:
            raise ConfigError(f"ghost_conv: c_out must be even, got {c_out}")
        return {"c_in": _pos_int(_req(attrs, "c_in", "ghost_conv"), "ghost_conv.c_in"),
                "c_out": c_out, "k": _pos_int(attrs.get("k", 1), "ghost_conv.k"),
                "s": _pos_int(attrs.get("s", 1), "ghost_conv.s"),
                "act": bool(attrs.get("act", True))}

    @classmethod
    def in_channels(cls, a):
        return [a["c_in"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c_out"]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        h = a["c_out"] // 2
        return [ConvSpec(prefix + "primary", a["c_in"], h, a["k"], a["s"]),
                ConvSpec(prefix + "cheap", h, h, 5, 1, 2, groups=h)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        p, c = cls.conv_specs(a, prefix)
        return cls(provider(p), provider(c), a["act"])

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c_in=kept.inp(0), c_out=2 * kept.out("primary"))


# -- Ghost_HGBlock ----------------------------------------------------------------

def ghost_hgblock_forward(x, b):
    """Three chained GhostConvs, concat, 1x1 fusion, plus the input skip."""
    if x.shape[1] != b.c:
        raise ShapeError(f"ghost_hg: input has {x.shape[1]} channels, block expects {b.c}",
                         dim="c", expected=b.c, actual=x.shape[1])
    g1 = b.ghost1.forward(x)
    g2 = b.ghost2.forward(g1)
    g3 = b.ghost3.forward(g2)
    return add(x, _cba(concat_channels([g1, g2, g3]), b.fuse))


@dataclass(frozen=True, eq=False)
class GhostHGBlock(BlockKind):
    ghost1: GhostConvBlock
    ghost2: GhostConvBlock
    ghost3: GhostConvBlock
    fuse: ConvParams
    kind = "ghost_hg"

    def __post_init__(self):
        widths = (self.ghost1.c_out, self.ghost2.c_out, self.ghost3.c_out)
        if self.ghost2.c_in != widths[0] or self.ghost3.c_in != widths[1]:
            raise ConfigError("ghost_hg: ghost convs must chain")
        if self.fuse.c_in != sum(widths) or self.fuse.c_out != self.ghost1.c_in:
            raise ConfigError(f"ghost_hg: fuse must map {sum(widths)} -> {self.ghost1.c_in} channels")

    c = property(lambda self: self.ghost1.c_in)
    def forward(self, x):
        return ghost_hgblock_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        c = _pos_int(_req(attrs, "c", "ghost_hg"), "ghost_hg.c")
        widths = [_pos_int(w, "ghost_hg.widths") for w in attrs.get("widths", [c, c, c])]
        if len(widths) != 3 or any(w % 2 for w in widths):
            raise ConfigError(f"ghost_hg: widths must be three even ints, got {widths}")
        return {"c": c, "k": _pos_int(attrs.get("k", 3), "ghost_hg.k"), "widths": widths}

    @classmethod
    def in_channels(cls, a):
        return [a["c"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c"]

    @classmethod
    def _ghost_attrs(cls, a):
        ins = [a["c"]] + a["widths"][:2]
        return [{"c_in": i, "c_out": o, "k": a["k"], "s": 1, "act": True}
                for i, o in zip(ins, a["widths"])]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        specs = []
        for i, ga in enumerate(cls._ghost_attrs(a), 1):
            specs += GhostConvBlock.conv_specs(ga, f"{prefix}ghost{i}.")
        return specs + [ConvSpec(prefix + "fuse", sum(a["widths"]), a["c"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        ghosts = [GhostConvBlock.build(ga, provider, f"{prefix}ghost{i}.")
                  for i, ga in enumerate(cls._ghost_attrs(a), 1)]
        return cls(*ghosts, provider(cls.conv_specs(a, prefix)[-1]))

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c=kept.inp(0),
                    widths=[2 * kept.out(f"ghost{i}.primary") for i in (1, 2, 3)])


# -- HGStem -------------------------------------------------------------------------

def hgstem_forward(x, b):
    """2x2/s2 conv, PW 1x1 + DW 5x5 pair, 2x2 max-pool, 1x1 projection (stride 4)."""
    n, c, h, w = x.shape
    if h % 4 or w % 4:
        raise ShapeError(f"hgstem: spatial dims {h}x{w} must be divisible by 4",
                         dim="h" if h % 4 else "w", expected="multiple of 4", actual=h if h % 4 else w)
    y = _cba(x, b.stage1)
    y = _cba(_cba(y, b.stage2a), b.stage2b)
    return _cba(maxpool2d(y, 2, 2, 0), b.stage3)


@dataclass(frozen=True, eq=False)
class HGStemBlock(BlockKind):
    stage1: ConvParams
    stage2a: ConvParams
    stage2b: ConvParams
    stage3: ConvParams
    kind = "hgstem"

    def __post_init__(self):
        if self.stage1.stride != (2, 2) or self.stage1.kernel != (2, 2):
            raise ConfigError("hgstem: stage1 must be a 2x2 stride-2 conv")
        if self.stage2b.groups != self.stage2b.c_in:
            raise ConfigError("hgstem: stage2b must be depthwise")

    def forward(self, x):
        return hgstem_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        c_mid = _pos_int(_req(attrs, "c_mid", "hgstem"), "hgstem.c_mid")
        return {"c_in": _pos_int(_req(attrs, "c_in", "hgstem"), "hgstem.c_in"), "c_mid": c_mid,
                "c_mid2": _pos_int(attrs.get("c_mid2", c_mid), "hgstem.c_mid2"),
                "c_out": _pos_int(_req(attrs, "c_out", "hgstem"), "hgstem.c_out")}

    @classmethod
    def in_channels(cls, a):
        return [a["c_in"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c_out"]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        m, m2 = a["c_mid"], a["c_mid2"]
        return [ConvSpec(prefix + "stage1", a["c_in"], m, 2, 2, 0),
                ConvSpec(prefix + "stage2a", m, m2, 1),
                ConvSpec(prefix + "stage2b", m2, m2, 5, 1, 2, groups=m2),
                ConvSpec(prefix + "stage3", m2, a["c_out"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        return cls(*map(provider, cls.conv_specs(a, prefix)))

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c_in=kept.inp(0), c_mid=kept.out("stage1"),
                    c_mid2=kept.out("stage2a"), c_out=kept.out("stage3"))


# -- PConv / FasterBlock ------------------------------------------------------------

def pconv_partial(x, b):
    """Convolve the leading ``cp_in`` channels; pass the rest through untouched."""
    if b.cp_in == b.c:
        return _cba(x, b.pconv)
    head, rest = split_channels(x, [b.cp_in, b.c - b.cp_in])
    return concat_channels([_cba(head, b.pconv), rest])


def faster_block_forward(x, b):
    if x.shape[1] != b.c:
        raise ShapeError(f"faster_block: input has {x.shape[1]} channels, block expects {b.c}",
                         dim="c", expected=b.c, actual=x.shape[1])
    return add(x, _cba(pconv_partial(x, b), b.fuse))


@dataclass(frozen=True, eq=False)
class FasterBlock(BlockKind):
    c: int
    pconv: ConvParams
    fuse: ConvParams
    kind = "faster_block"

    def __post_init__(self):
        if not 1 <= self.cp_in <= self.c:
            raise ConfigError(f"faster_block: partial width {self.cp_in} outside [1, {self.c}]")
        if self.fuse.c_in != self.pconv.c_out + self.c - self.cp_in or self.fuse.c_out != self.c:
            raise ConfigError("faster_block: fuse conv does not match the partial layout")

    cp_in = property(lambda self: self.pconv.c_in)
    def forward(self, x):
        return faster_block_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        c = _pos_int(_req(attrs, "c", "faster_block"), "faster_block.c")
        if "cp_in" not in attrs and c < 4:
            raise ConfigError(f"faster_block: c={c} < 4 leaves no channels for the partial conv")
        cp_in = _pos_int(attrs.get("cp_in", c // 4), "faster_block.cp_in")
        if cp_in > c:
            raise ConfigError(f"faster_block: cp_in={cp_in} exceeds c={c}")
        return {"c": c, "cp_in": cp_in,
                "cp_out": _pos_int(attrs.get("cp_out", cp_in), "faster_block.cp_out")}

    @classmethod
    def in_channels(cls, a):
        return [a["c"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c"]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        return [ConvSpec(prefix + "pconv", a["cp_in"], a["cp_out"], 3),
                ConvSpec(prefix + "fuse", a["cp_out"] + a["c"] - a["cp_in"], a["c"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        p, f = cls.conv_specs(a, prefix)
        return cls(a["c"], provider(p), provider(f))

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c=kept.inp(0), cp_in=kept.inp_prefix(0, a["cp_in"]),
                    cp_out=kept.out("pconv"))


# -- C2f-Faster and the baseline C2f ---------------------------------------------------

def c2f_faster_forward(x, b):
    """entry 1x1, split, FasterBlock chain on the first half, concat with the
    bypass half, exit 1x1. ``literal_concat`` reuses the first half instead."""
    if x.shape[1] != b.entry.c_in:
        raise ShapeError(f"c2f_faster: input has {x.shape[1]} channels, block expects {b.entry.c_in}",
                         dim="c", expected=b.entry.c_in, actual=x.shape[1])
    s1, s2 = split_channels(_cba(x, b.entry), list(b.split))
    y = s1
    for blk in b.blocks:
        y = blk.forward(y)
    return _cba(concat_channels([s1 if b.literal_concat else s2, y]), b.exit)


class _SplitBlock(BlockKind):
    """Shared attrs of C2f-style blocks: entry conv, two-way split, exit conv."""

    @classmethod
    def normalize(cls, attrs):
        kind = cls.kind
        c_out = _pos_int(_req(attrs, "c_out", kind), f"{kind}.c_out")
        if "split" in attrs:
            split = [_pos_int(s, f"{kind}.split") for s in attrs["split"]]
        else:
            c_h = _pos_int(attrs.get("c_h", c_out // 2), f"{kind}.c_h")
            split = [c_h, c_h]
        if len(split) != 2:
            raise ConfigError(f"{kind}: split must have two entries")
        a = {"c_in": _pos_int(_req(attrs, "c_in", kind), f"{kind}.c_in"),
             "c_out": c_out, "split": split}
        return cls._normalize_chain(attrs, a)

    @classmethod
    def in_channels(cls, a):
        return [a["c_in"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c_out"]


@dataclass(frozen=True, eq=False)
class C2fFasterBlock(_SplitBlock):
    entry: ConvParams
    blocks: Tuple[FasterBlock, ...]
    exit: ConvParams
    split: Tuple[int, int]
    literal_concat: bool = False
    kind = "c2f_faster"

    def __post_init__(self):
        a, b = self.split
        if a + b != self.entry.c_out:
            raise ConfigError(f"c2f_faster: split {self.split} != entry width {self.entry.c_out}")
        if not self.blocks or any(blk.c != a for blk in self.blocks):
            raise ConfigError(f"c2f_faster: needs >= 1 FasterBlock of width {a}")
        want = a + (a if self.literal_concat else b)
        if self.exit.c_in != want:
            raise ConfigError(f"c2f_faster: exit expects {self.exit.c_in} channels, concat gives {want}")

    def forward(self, x):
        return c2f_faster_forward(x, self)

    @classmethod
    def _normalize_chain(cls, attrs, a):
        width = a["split"][0]
        if "blocks" in attrs:
            blocks = [[_pos_int(i, "cp_in"), _pos_int(o, "cp_out")] for i, o in attrs["blocks"]]
        else:
            n = _pos_int(attrs.get("n", 1), "c2f_faster.n")
            fb = FasterBlock.normalize({"c": width})
            blocks = [[fb["cp_in"], fb["cp_out"]] for _ in range(n)]
        if "n" in attrs and len(blocks) != attrs["n"]:
            raise ConfigError(f"c2f_faster: n={attrs['n']} but {len(blocks)} blocks listed")
        if not blocks:
            raise ConfigError("c2f_faster: n must be >= 1")
        a["blocks"] = blocks
        a["literal_concat"] = bool(attrs.get("literal_concat", False))
        return a

    @classmethod
    def _fb_attrs(cls, a):
        return [{"c": a["split"][0], "cp_in": i, "cp_out": o} for i, o in a["blocks"]]

    @classmethod
    def _exit_in(cls, a):
        s1, s2 = a["split"]
        return s1 + (s1 if a.get("literal_concat") else s2)

    @classmethod
    def conv_specs(cls, a, prefix=""):
        specs = [ConvSpec(prefix + "entry", a["c_in"], sum(a["split"]), 1)]
        for i, fa in enumerate(cls._fb_attrs(a)):
            specs += FasterBlock.conv_specs(fa, f"{prefix}blocks.{i}.")
        return specs + [ConvSpec(prefix + "exit", cls._exit_in(a), a["c_out"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        specs = cls.conv_specs(a, prefix)
        blocks = tuple(FasterBlock.build(fa, provider, f"{prefix}blocks.{i}.")
                       for i, fa in enumerate(cls._fb_attrs(a)))
        return cls(provider(specs[0]), blocks, provider(specs[-1]), tuple(a["split"]),
                   a["literal_concat"])

    @classmethod
    def rebuild(cls, a, kept):
        s1 = kept.out_prefix("entry", a["split"][0])
        blocks = [[kept.out_prefix("entry", cp_in), kept.out(f"blocks.{i}.pconv")]
                  for i, (cp_in, _) in enumerate(a["blocks"])]
        return dict(a, c_in=kept.inp(0), c_out=kept.out("exit"),
                    split=[s1, kept.out("entry") - s1], blocks=blocks)


def bottleneck_forward(x, cv1, cv2):
    return add(x, _cba(_cba(x, cv1), cv2))


def c2f_forward(x, b):
    """Baseline C2f with the same split/concat wiring as C2f-Faster; each
    bottleneck is two 3x3 convs with a residual add."""
    if x.shape[1] != b.entry.c_in:
        raise ShapeError(f"c2f: input has {x.shape[1]} channels, block expects {b.entry.c_in}",
                         dim="c", expected=b.entry.c_in, actual=x.shape[1])
    s1, s2 = split_channels(_cba(x, b.entry), list(b.split))
    y = s1
    for cv1, cv2 in b.bottlenecks:
        y = bottleneck_forward(y, cv1, cv2)
    return _cba(concat_channels([s2, y]), b.exit)


@dataclass(frozen=True, eq=False)
class C2fBlock(_SplitBlock):
    entry: ConvParams
    bottlenecks: Tuple[Tuple[ConvParams, ConvParams], ...]
    exit: ConvParams
    split: Tuple[int, int]
    kind = "c2f"

    def __post_init__(self):
        a, b = self.split
        if a + b != self.entry.c_out or self.exit.c_in != a + b:
            raise ConfigError(f"c2f: split {self.split} inconsistent with entry/exit widths")
        if not self.bottlenecks:
            raise ConfigError("c2f: needs >= 1 bottleneck")

    def forward(self, x):
        return c2f_forward(x, self)

    @classmethod
    def _normalize_chain(cls, attrs, a):
        width = a["split"][0]
        if "hidden" in attrs:
            hidden = [_pos_int(m, "c2f.hidden") for m in attrs["hidden"]]
        else:
            hidden = [width] * _pos_int(attrs.get("n", 1), "c2f.n")
        if "n" in attrs and len(hidden) != attrs["n"]:
            raise ConfigError(f"c2f: n={attrs['n']} but {len(hidden)} hidden widths listed")
        if not hidden:
            raise ConfigError("c2f: n must be >= 1")
        a["hidden"] = hidden
        return a

    @classmethod
    def conv_specs(cls, a, prefix=""):
        s1, s2 = a["split"]
        specs = [ConvSpec(prefix + "entry", a["c_in"], s1 + s2, 1)]
        for i, m in enumerate(a["hidden"]):
            specs += [ConvSpec(f"{prefix}blocks.{i}.cv1", s1, m, 3),
                      ConvSpec(f"{prefix}blocks.{i}.cv2", m, s1, 3)]
        return specs + [ConvSpec(prefix + "exit", s1 + s2, a["c_out"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        ps = [provider(s) for s in cls.conv_specs(a, prefix)]
        pairs = tuple((ps[1 + 2 * i], ps[2 + 2 * i]) for i in range(len(a["hidden"])))
        return cls(ps[0], pairs, ps[-1], tuple(a["split"]))

    @classmethod
    def rebuild(cls, a, kept):
        s1 = kept.out_prefix("entry", a["split"][0])
        return dict(a, c_in=kept.inp(0), c_out=kept.out("exit"),
                    split=[s1, kept.out("entry") - s1],
                    hidden=[kept.out(f"blocks.{i}.cv1") for i in range(len(a["hidden"]))])


# -- SPPF ------------------------------------------------------------------------------

def sppf_forward(x, b):
    y = _cba(x, b.cv1)
    m1 = maxpool2d(y, 5, 1, 2)
    m2 = maxpool2d(m1, 5, 1, 2)
    m3 = maxpool2d(m2, 5, 1, 2)
    return _cba(concat_channels([y, m1, m2, m3]), b.cv2)


@dataclass(frozen=True, eq=False)
class SPPFBlock(BlockKind):
    cv1: ConvParams
    cv2: ConvParams
    kind = "sppf"

    def __post_init__(self):
        if self.cv2.c_in != 4 * self.cv1.c_out:
            raise ConfigError("sppf: cv2 must consume the four pooled copies")

    def forward(self, x):
        return sppf_forward(x, self)

    @classmethod
    def normalize(cls, attrs):
        c_in = _pos_int(_req(attrs, "c_in", "sppf"), "sppf.c_in")
        return {"c_in": c_in, "c_mid": _pos_int(attrs.get("c_mid", max(1, c_in // 2)), "sppf.c_mid"),
                "c_out": _pos_int(_req(attrs, "c_out", "sppf"), "sppf.c_out")}

    @classmethod
    def in_channels(cls, a):
        return [a["c_in"]]

    @classmethod
    def out_channels(cls, a, in_chs):
        return a["c_out"]

    @classmethod
    def conv_specs(cls, a, prefix=""):
        return [ConvSpec(prefix + "cv1", a["c_in"], a["c_mid"], 1),
                ConvSpec(prefix + "cv2", 4 * a["c_mid"], a["c_out"], 1)]

    @classmethod
    def build(cls, a, provider, prefix=""):
        return cls(*map(provider, cls.conv_specs(a, prefix)))

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c_in=kept.inp(0), c_mid=kept.out("cv1"), c_out=kept.out("cv2"))


# -- detection heads --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GCScale:
    align: ConvParams
    gconv1: ConvParams
    gconv2: ConvParams
    cls_out: ConvParams
    box_out: ConvParams


def gcdetect_forward(features, h):
    """Per scale: align 1x1, two shared grouped 3x3 convs, then 1x1 cls and box
    outputs read the same trunk tensor."""
    if len(features) != len(h.scales):
        raise ShapeError(f"gcdetect: got {len(features)} feature maps for {len(h.scales)} scales",
                         dim="scales", expected=len(h.scales), actual=len(features))
    outs = []
    for x, s in zip(features, h.scales):
        t = _cba(_cba(_cba(x, s.align), s.gconv1), s.gconv2)
        outs.append((_cba(t, s.cls_out, act=False), _cba(t, s.box_out, act=False)))
    return outs


class _Head(BlockKind):
    @classmethod
    def num_inputs(cls, a):
        return len(a["c_in"])

    @classmethod
    def in_channels(cls, a):
        return list(a["c_in"])

    @classmethod
    def out_channels(cls, a, in_chs):
        return None

    @classmethod
    def output_names(cls, a):
        return [f"{kind}{p}" for p in range(len(a["c_in"])) for kind in ("cls", "box")]

    @classmethod
    def protected_subs(cls, a):
        return [f"p{p}.{o}" for p in range(len(a["c_in"])) for o in ("cls", "box")]

    @classmethod
    def _head_common(cls, attrs):
        c_in = attrs.get("c_in")
        if not isinstance(c_in, list) or not c_in:
            raise ConfigError(f"{cls.kind}: c_in must be a non-empty list of widths")
        return {"c_in": [_pos_int(c, f"{cls.kind}.c_in") for c in c_in],
                "num_classes": _pos_int(_req(attrs, "num_classes", cls.kind), f"{cls.kind}.num_classes")}


@dataclass(frozen=True, eq=False)
class GCDetectHead(_Head):
    scales: Tuple[GCScale, ...]
    kind = "gcdetect"

    def __post_init__(self):
        for s in self.scales:
            if s.cls_out.c_in != s.gconv2.c_out or s.box_out.c_in != s.gconv2.c_out:
                raise ConfigError("gcdetect: cls/box outputs must read the shared trunk")

    def forward(self, *features):
        return gcdetect_forward(list(features), self)

    @classmethod
    def normalize(cls, attrs):
        a = cls._head_common(attrs)
        w = _pos_int(attrs.get("w", 64), "gcdetect.w")
        g = _pos_int(attrs.get("groups", 16), "gcdetect.groups")
        if w % g:
            raise ConfigError(f"gcdetect: head width {w} not divisible by groups={g}")
        a.update(w=w, groups=g)
        return a

    @classmethod
    def conv_specs(cls, a, prefix=""):
        w, g, specs = a["w"], a["groups"], []
        for p, c in enumerate(a["c_in"]):
            q = f"{prefix}p{p}."
            specs += [ConvSpec(q + "align", c, w, 1),
                      ConvSpec(q + "gconv1", w, w, 3, groups=g),
                      ConvSpec(q + "gconv2", w, w, 3, groups=g),
                      ConvSpec(q + "cls", w, a["num_classes"], 1),
                      ConvSpec(q + "box", w, 4, 1)]
        return specs

    @classmethod
    def protected_subs(cls, a):
        return [f"p{p}.{o}" for p in range(len(a["c_in"]))
                for o in ("gconv1", "gconv2", "cls", "box")]

    @classmethod
    def build(cls, a, provider, prefix=""):
        ps = [provider(s) for s in cls.conv_specs(a, prefix)]
        return cls(tuple(GCScale(*ps[5 * p:5 * p + 5]) for p in range(len(a["c_in"]))))

    @classmethod
    def rebuild(cls, a, kept):
        return dict(a, c_in=[kept.inp(i) for i in range(len(a["c_in"]))])


@dataclass(frozen=True, eq=False)
class PlainScale:
    cls1: ConvParams
    cls2: ConvParams
    cls_out: ConvParams
    box1: ConvParams
    box2: ConvParams
    box_out: ConvParams


def plain_head_forward(features, h):
    """Baseline head: separate cls and box trunks of two dense 3x3 convs each."""
    if len(features) != len(h.scales):
        raise ShapeError(f"plain_head: got {len(features)} feature maps for {len(h.scales)} scales",
                         dim="scales", expected=len(h.scales), actual=len(features))
    outs = []
    for x, s in zip(features, h.scales):
        c = _cba(_cba(_cba(x, s.cls1), s.cls2), s.cls_out, act=False)
        b = _cba(_cba(_cba(x, s.box1), s.box2), s.box_out, act=False)
        outs.append((c, b))
    return outs


@dataclass(frozen=True, eq=False)
class PlainDetectHead(_Head):
    scales: Tuple[PlainScale, ...]
    kind = "plain_head"

    def forward(self, *features):
        return plain_head_forward(list(features), self)

    @classmethod
    def normalize(cls, attrs):
        a = cls._head_common(attrs)
        w = _pos_int(attrs.get("w", 64), "plain_head.w")
        widths = attrs.get("widths", [[w] * 4 for _ in a["c_in"]])
        if len(widths) != len(a["c_in"]) or any(len(r) != 4 for r in widths):
            raise ConfigError("plain_head: widths must list [cls1, cls2, box1, box2] per scale")
        a.update(w=w, widths=[[_pos_int(v, "plain_head.widths") for v in r] for r in widths])
        return a

    @classmethod
    def conv_specs(cls, a, prefix=""):
        nc, specs = a["num_classes"], []
        for p, (c, (c1, c2, b1, b2)) in enumerate(zip(a["c_in"], a["widths"])):
            q = f"{prefix}p{p}."
            specs += [ConvSpec(q + "cls1", c, c1, 3), ConvSpec(q + "cls2", c1, c2, 3),
                      ConvSpec(q + "cls", c2, nc, 1),
                      ConvSpec(q + "box1", c, b1, 3), ConvSpec(q + "box2", b1, b2, 3),
                      ConvSpec(q + "box", b2, 4, 1)]
        return specs

    @classmethod
    def build(cls, a, provider, prefix=""):
        ps = [provider(s) for s in cls.conv_specs(a, prefix)]
        return cls(tuple(PlainScale(*ps[6 * p:6 * p + 6]) for p in range(len(a["c_in"]))))

    @classmethod
    def rebuild(cls, a, kept):
        widths = [[kept.out(f"p{p}.{s}") for s in ("cls1", "cls2", "box1", "box2")]
                  for p in range(len(a["c_in"]))]
        return dict(a, c_in=[kept.inp(i) for i in range(len(a["c_in"]))], widths=widths)


def baseline_forward(x, block):
    """Dispatch for the baseline blocks (ConvBNAct, C2f, SPPF, PlainDetectHead)."""
    if isinstance(block, PlainDetectHead):
        return plain_head_forward(list(x), block)
    if isinstance(block, (ConvBNAct, C2fBlock, SPPFBlock)):
        return block.forward(x)
    raise TypeError(f"not a baseline block: {type(block).__name__}")


def describe(kind, attrs):
    """JSON fragment for a block: kind, normalized attrs and declared convs."""
    cls = block_kind(kind)
    a = cls.normalize(attrs)
    convs = [{"sub": s.sub, "c_in": s.c_in, "c_out": s.c_out, "k": s.k,
              "stride": s.stride, "groups": s.groups} for s in cls.conv_specs(a)]
    return {"kind": kind, "attrs": a, "convs": convs}


def param_count(block):
    """Count weight and bias elements by walking the block's ConvParams."""
    total = 0
    stack = [block]
    while stack:
        obj = stack.pop()
        if isinstance(obj, ConvParams):
            total += obj.weight.size + (0 if obj.bias is None else obj.bias.size)
        elif isinstance(obj, (list, tuple)):
            stack.extend(obj)
        elif hasattr(obj, "__dataclass_fields__"):
            stack.extend(getattr(obj, f) for f in obj.__dataclass_fields__)
    return total
