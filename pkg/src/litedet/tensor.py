"""Dense NCHW float32 tensors and the handful of operators the blocks need.

Every operator is a pure function. Convolution accumulates in float32 in a
fixed kernel-row-major order (input channel, kernel row, kernel column), so
the default ``direct`` path is bit-reproducible and bit-identical to the
scalar ``naive`` reference. ``im2col`` routes through BLAS and is only
guaranteed to agree to rounding.

Operators also accept symbolic tensors (anything with a truthy ``symbolic``
attribute and a ``tracer``); those calls are forwarded to the tracer so the
same block code drives shape propagation and channel analysis.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, CorruptionError, ShapeError

_DIMS = ("n", "c", "h", "w")


def _is_symbolic(x):
    return getattr(x, "symbolic", False)


class Tensor4:
    """Immutable dense (n, c, h, w) float32 tensor."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, copy=True, order="C")
        _check_rank(arr)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        # arr must be a fresh float32 array nobody else holds
        t = object.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        _check_rank(arr)
        arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape):
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float32))

    @classmethod
    def full(cls, shape, value):
        return cls._wrap(np.full(tuple(shape), value, dtype=np.float32))

    @classmethod
    def from_flat(cls, n, c, h, w, values):
        flat = np.asarray(values, dtype=np.float32)
        if flat.size != n * c * h * w:
            raise ShapeError(
                f"flat data has {flat.size} values, expected n*c*h*w={n * c * h * w}",
                dim="data", expected=n * c * h * w, actual=flat.size)
        return cls._wrap(flat.reshape(n, c, h, w).copy())

    @property
    def shape(self):
        return self.data.shape

    n = property(lambda self: self.data.shape[0])
    c = property(lambda self: self.data.shape[1])
    h = property(lambda self: self.data.shape[2])
    w = property(lambda self: self.data.shape[3])

    def bit_equal(self, other):
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return "Tensor4(shape={})".format("x".join(map(str, self.shape)))


def _check_rank(arr):
    if arr.ndim != 4:
        raise ShapeError(f"Tensor4 needs 4 dims, got {arr.ndim}", dim="rank",
                         expected=4, actual=arr.ndim)
    for name, size in zip(_DIMS, arr.shape):
        if size < 1:
            raise ShapeError(f"dim {name} must be >= 1, got {size}", dim=name,
                             expected=">=1", actual=size)


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    ``weight`` has shape (c_out, c_in // groups, k_h, k_w). ``name`` is the
    parameter prefix in a weight store (``"node.sub"``) and is only used for
    tracing and diagnostics.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1
    name: str = ""

    def __post_init__(self):
        w = self.weight
        if not isinstance(w, np.ndarray) or w.dtype != np.float32:
            w = np.asarray(w, dtype=np.float32)
            object.__setattr__(self, "weight", w)
        if w.ndim != 4:
            raise ConfigError(f"{self._label()}: weight must be 4-D, got shape {w.shape}")
        b = self.bias
        if b is not None:
            b = np.asarray(b, dtype=np.float32).reshape(-1)
            object.__setattr__(self, "bias", b)
            if b.shape[0] != w.shape[0]:
                raise ConfigError(f"{self._label()}: bias has {b.shape[0]} entries "
                                  f"for {w.shape[0]} output channels")
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        g = int(self.groups)
        object.__setattr__(self, "groups", g)
        if g < 1:
            raise ConfigError(f"{self._label()}: groups must be positive, got {g}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"{self._label()}: bad stride {self.stride} or padding {self.padding}")
        if w.shape[0] % g:
            raise ConfigError(f"{self._label()}: c_out={w.shape[0]} not divisible by groups={g}")

    def _label(self):
        return f"conv '{self.name}'" if self.name else "conv"

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]


def conv_output_hw(h, w, kernel, stride, padding):
    kh, kw = kernel
    return ((h + 2 * padding[0] - kh) // stride[0] + 1,
            (w + 2 * padding[1] - kw) // stride[1] + 1)


def check_conv_input(shape, p):
    """Validate an (n, c, h, w) input against ``p``; return the output shape."""
    n, c, h, w = shape
    if c != p.c_in:
        raise ShapeError(f"{p._label()}: input has {c} channels, weights expect "
                         f"{p.c_in} (groups={p.groups})", dim="c", expected=p.c_in, actual=c)
    kh, kw = p.kernel
    if h + 2 * p.padding[0] < kh:
        raise ShapeError(f"{p._label()}: padded height {h + 2 * p.padding[0]} < kernel {kh}",
                         dim="h", expected=kh, actual=h + 2 * p.padding[0])
    if w + 2 * p.padding[1] < kw:
        raise ShapeError(f"{p._label()}: padded width {w + 2 * p.padding[1]} < kernel {kw}",
                         dim="w", expected=kw, actual=w + 2 * p.padding[1])
    ho, wo = conv_output_hw(h, w, p.kernel, p.stride, p.padding)
    return n, p.c_out, ho, wo


def conv2d(x, p, method="direct"):
    """Grouped 2-D convolution with zero padding.

    method: ``direct`` (default, deterministic shifted-slice accumulation),
    ``im2col`` (BLAS matmul) or ``naive`` (scalar loops, slow, tiny inputs only).
    """
    if _is_symbolic(x):
        return x.tracer.conv2d(x, p)
    n, c_out, ho, wo = check_conv_input(x.shape, p)
    ph, pw = p.padding
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if method == "direct":
        out = _conv_direct(xp, p, ho, wo)
    elif method == "im2col":
        out = _conv_im2col(xp, p, ho, wo)
    elif method == "naive":
        out = _conv_naive(xp, p, ho, wo)
    else:
        raise ValueError(f"unknown conv method {method!r}")
    if p.bias is not None and method != "naive":
        out += p.bias[None, :, None, None]
    return Tensor4._wrap(out)


def _conv_direct(xp, p, ho, wo):
    n, c, _, _ = xp.shape
    g = p.groups
    cig, cog = c // g, p.c_out // g
    kh, kw = p.kernel
    sh, sw = p.stride
    xg = xp.reshape(n, g, cig, xp.shape[2], xp.shape[3])
    wg = p.weight.reshape(g, cog, cig, kh, kw)
    out = np.zeros((n, g, cog, ho, wo), dtype=np.float32)
    tmp = np.empty_like(out)
    for ci in range(cig):
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, ci, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                np.multiply(wg[None, :, :, ci, i, j, None, None], xs[:, :, None], out=tmp)
                out += tmp
    return out.reshape(n, p.c_out, ho, wo)


def _conv_im2col(xp, p, ho, wo):
    n, c, hp, wp = xp.shape
    g = p.groups
    cig, cog = c // g, p.c_out // g
    kh, kw = p.kernel
    sh, sw = p.stride
    win = sliding_window_view(xp.reshape(n, g, cig, hp, wp), (kh, kw), axis=(3, 4))
    win = win[:, :, :, :sh * (ho - 1) + 1:sh, :sw * (wo - 1) + 1:sw]
    # (n, g, ho, wo, cig*kh*kw) @ (g, cig*kh*kw, cog)
    cols = win.transpose(0, 1, 3, 4, 2, 5, 6).reshape(n, g, ho * wo, cig * kh * kw)
    wmat = p.weight.reshape(g, cog, cig * kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, wmat[None])  # (n, g, ho*wo, cog)
    return np.ascontiguousarray(
        out.transpose(0, 1, 3, 2).reshape(n, p.c_out, ho, wo), dtype=np.float32)


def _conv_naive(xp, p, ho, wo):
    # float64 products of float32 values are exact and float64 sums of two
    # float32 values round to float32 without double-rounding error, so this
    # reproduces float32 arithmetic step by step.
    f32 = np.float32
    n, c = xp.shape[:2]
    g = p.groups
    cig, cog = c // g, p.c_out // g
    kh, kw = p.kernel
    sh, sw = p.stride
    xl = xp.tolist()
    wl = p.weight.tolist()
    bl = None if p.bias is None else p.bias.tolist()
    out = np.zeros((n, p.c_out, ho, wo), dtype=np.float32)
    for b in range(n):
        for co in range(p.c_out):
            base = (co // cog) * cig
            wco = wl[co]
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cig):
                        plane = xl[b][base + ci]
                        wk = wco[ci]
                        for i in range(kh):
                            row = plane[oy * sh + i]
                            wrow = wk[i]
                            for j in range(kw):
                                prod = float(f32(wrow[j] * row[ox * sw + j]))
                                acc = float(f32(acc + prod))
                    if bl is not None:
                        acc = float(f32(acc + bl[co]))
                    out[b, co, oy, ox] = acc
    return out


def maxpool2d(x, k, stride, padding=0):
    """Max pooling; padded cells count as -inf."""
    if _is_symbolic(x):
        return x.tracer.maxpool2d(x, k, stride, padding)
    n, c, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"maxpool window {k} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}", dim="h" if h + 2 * padding < k else "w",
                         expected=k, actual=min(h, w) + 2 * padding)
    if stride < 1 or padding < 0:
        raise ConfigError(f"maxpool: bad stride {stride} or padding {padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    ho, wo = conv_output_hw(h, w, (k, k), (stride, stride), (padding, padding))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return Tensor4._wrap(win.max(axis=(4, 5)))


def silu(x):
    if _is_symbolic(x):
        return x.tracer.pointwise(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    e = np.exp(-np.abs(d))  # never overflows
    out[pos] = d[pos] / (np.float32(1) + e[pos])
    out[~pos] = d[~pos] * e[~pos] / (np.float32(1) + e[~pos])
    return Tensor4._wrap(out)


def concat_channels(parts: Sequence):
    if not parts:
        raise ShapeError("concat of zero tensors", dim="c", expected=">=1", actual=0)
    if _is_symbolic(parts[0]):
        return parts[0].tracer.concat(list(parts))
    ref = parts[0].shape
    for i, t in enumerate(parts[1:], 1):
        for d in (0, 2, 3):
            if t.shape[d] != ref[d]:
                raise ShapeError(f"concat part {i}: dim {_DIMS[d]}={t.shape[d]} != {ref[d]}",
                                 dim=_DIMS[d], expected=ref[d], actual=t.shape[d])
    if len(parts) == 1:
        return parts[0]
    return Tensor4._wrap(np.concatenate([t.data for t in parts], axis=1))


def split_channels(x, sizes: Sequence[int]):
    if any(int(s) < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} must be >= 1 and sum to c={x.shape[1]}",
                         dim="c", expected=x.shape[1], actual=sum(sizes))
    if _is_symbolic(x):
        return x.tracer.split(x, list(sizes))
    out, start = [], 0
    for s in sizes:
        out.append(Tensor4._wrap(x.data[:, start:start + s].copy()))
        start += s
    return out


def add(a, b):
    if a.shape != b.shape:
        d = next(i for i in range(4) if a.shape[i] != b.shape[i])
        raise ShapeError(f"add: dim {_DIMS[d]} differs ({a.shape[d]} vs {b.shape[d]})",
                         dim=_DIMS[d], expected=a.shape[d], actual=b.shape[d])
    if _is_symbolic(a):
        return a.tracer.add(a, b)
    return Tensor4._wrap(a.data + b.data)


def upsample_nearest2x(x):
    if _is_symbolic(x):
        return x.tracer.upsample(x)
    return Tensor4._wrap(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))


# -- T4F0 raw dumps -------------------------------------------------------

T4F_MAGIC = b"T4F0"


def tensor_to_bytes(t):
    return T4F_MAGIC + struct.pack("<4I", *t.shape) + t.data.astype("<f4").tobytes()


def tensor_from_bytes(buf):
    if len(buf) < 20 or buf[:4] != T4F_MAGIC:
        raise CorruptionError("not a T4F0 tensor dump")
    n, c, h, w = struct.unpack_from("<4I", buf, 4)
    count = n * c * h * w
    if len(buf) != 20 + 4 * count:
        raise CorruptionError(f"T4F0 payload has {len(buf) - 20} bytes, header implies {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=20)
    return Tensor4(data.reshape(n, c, h, w))


def save_tensor(path, t):
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes())
