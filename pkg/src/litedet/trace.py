"""Symbolic execution of block code.

A ``SymTensor`` carries a shape and, per channel, an integer id naming where
that channel came from. Running ordinary block forwards on SymTensors
records every convolution (geometry, spatial size, which channel ids it reads
and writes) and every residual add (which ids must be pruned together).
The cost analyzer reads the conv records; the pruner reads everything.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .tensor import check_conv_input, conv_output_hw
from .errors import ShapeError


@dataclass(frozen=True)
class ConvRecord:
    name: str
    node: str
    in_ids: Tuple[int, ...]
    out_ids: Tuple[int, ...]
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    groups: int
    bias: bool
    in_shape: Tuple[int, int, int, int]
    out_shape: Tuple[int, int, int, int]

    @property
    def c_in(self):
        return len(self.in_ids)

    @property
    def c_out(self):
        return len(self.out_ids)

    @property
    def depthwise(self):
        return self.groups > 1 and self.groups == self.c_in == self.c_out

    @property
    def grouped(self):
        return self.groups > 1 and not self.depthwise

    @property
    def params(self):
        return conv_params(self.c_in, self.c_out, self.kernel, self.groups, self.bias)

    @property
    def macs(self):
        n, _, ho, wo = self.out_shape
        return conv_macs(self.c_in, self.c_out, self.kernel, self.groups, n * ho * wo)


def conv_params(c_in, c_out, kernel, groups, bias):
    return c_out * (c_in // groups) * kernel[0] * kernel[1] + (c_out if bias else 0)


def conv_macs(c_in, c_out, kernel, groups, positions):
    return c_out * (c_in // groups) * kernel[0] * kernel[1] * positions


class SymTensor:
    symbolic = True
    __slots__ = ("tracer", "shape", "ids")

    def __init__(self, tracer, shape, ids):
        self.tracer = tracer
        self.shape = tuple(int(s) for s in shape)
        self.ids = tuple(ids)
        assert len(self.ids) == self.shape[1]

    n = property(lambda self: self.shape[0])
    c = property(lambda self: self.shape[1])
    h = property(lambda self: self.shape[2])
    w = property(lambda self: self.shape[3])


class Tracer:
    def __init__(self):
        self.origins: List[Tuple[str, int]] = []
        self.convs: List[ConvRecord] = []
        self.adds: List[Tuple[Tuple[int, ...], Tuple[int, ...]]] = []
        self.splits: List[Tuple[int, ...]] = []
        self.node = ""

    def _new_ids(self, owner, count):
        start = len(self.origins)
        self.origins.extend((owner, j) for j in range(count))
        return tuple(range(start, start + count))

    def input(self, shape, owner="<input>"):
        return SymTensor(self, shape, self._new_ids(owner, shape[1]))

    def conv2d(self, x, p):
        out_shape = check_conv_input(x.shape, p)
        name = p.name or f"{self.node}.<anon{len(self.convs)}>"
        depthwise = p.groups > 1 and p.groups == p.c_in == p.c_out
        out_ids = x.ids if depthwise else self._new_ids(name, p.c_out)
        self.convs.append(ConvRecord(
            name=name, node=self.node, in_ids=x.ids, out_ids=out_ids,
            kernel=p.kernel, stride=p.stride, groups=p.groups,
            bias=p.bias is not None, in_shape=x.shape, out_shape=out_shape))
        return SymTensor(self, out_shape, out_ids)

    def maxpool2d(self, x, k, stride, padding):
        n, c, h, w = x.shape
        if h + 2 * padding < k or w + 2 * padding < k:
            raise ShapeError(f"maxpool window {k} larger than padded input", dim="h",
                             expected=k, actual=min(h, w) + 2 * padding)
        ho, wo = conv_output_hw(h, w, (k, k), (stride, stride), (padding, padding))
        return SymTensor(self, (n, c, ho, wo), x.ids)

    def pointwise(self, x):
        return x

    def concat(self, parts):
        ref = parts[0].shape
        for i, t in enumerate(parts[1:], 1):
            for d in (0, 2, 3):
                if t.shape[d] != ref[d]:
                    raise ShapeError(f"concat part {i}: dim {'nchw'[d]}={t.shape[d]} != {ref[d]}",
                                     dim="nchw"[d], expected=ref[d], actual=t.shape[d])
        ids = tuple(i for t in parts for i in t.ids)
        return SymTensor(self, (ref[0], len(ids), ref[2], ref[3]), ids)

    def split(self, x, sizes):
        out, start = [], 0
        for s in sizes:
            ids = x.ids[start:start + s]
            self.splits.append(ids)
            out.append(SymTensor(self, (x.n, s, x.h, x.w), ids))
            start += s
        return out

    def add(self, a, b):
        self.adds.append((a.ids, b.ids))
        return SymTensor(self, a.shape, a.ids)

    def upsample(self, x):
        return SymTensor(self, (x.n, x.c, 2 * x.h, 2 * x.w), x.ids)


def shape_only_params(spec_shape):
    """A zero-strided stand-in weight of the right shape (no memory)."""
    return np.broadcast_to(np.float32(0), spec_shape)
