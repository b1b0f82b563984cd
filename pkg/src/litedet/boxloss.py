"""Inner-MPDIoU box regression geometry, with IoU and CIoU baselines.

Boxes come in as (cx, cy, w, h) in pixels. Each box is shrunk or grown by
``ratio`` about its centre to make an auxiliary "inner" box; overlap, union
and the two corner distances (top-left to top-left, bottom-right to
bottom-right) are taken on the inner boxes and the distances are normalized
by the squared image diagonal::

    value = inter / union - d1^2 / (W^2 + H^2) - d2^2 / (W^2 + H^2)
    loss  = 1 - value

All arithmetic is float64. The batch functions take ``(..., 4)`` arrays and
broadcast; the scalar functions wrap them for single ``BoxCWH`` pairs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .rng import SplitMix64

RATIO_MIN, RATIO_MAX = 0.5, 1.5
DISTANCE_MODES = ("inner", "original")
TIE_MODES = ("right", "left", "mean")


@dataclass(frozen=True)
class BoxCWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"box has non-finite coordinates {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ConfigError(f"box width and height must be positive, got w={self.w}, h={self.h}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class CornerBox:
    l: float
    t: float
    r: float
    b: float

    def __post_init__(self):
        if self.l > self.r or self.t > self.b:
            raise ConfigError(f"corner box needs l <= r and t <= b, got {self}")


@dataclass(frozen=True)
class LossContext:
    img_w: float
    img_h: float
    ratio: float = 1.0

    def __post_init__(self):
        if not (self.img_w > 0 and self.img_h > 0):
            raise ConfigError(f"image dims must be positive, got {self.img_w}x{self.img_h}")
        check_ratio(self.ratio)

    @property
    def diag_sq(self):
        return float(self.img_w) ** 2 + float(self.img_h) ** 2


def check_ratio(ratio):
    if not (RATIO_MIN <= ratio <= RATIO_MAX):
        raise ConfigError(f"ratio must lie in [{RATIO_MIN}, {RATIO_MAX}], got {ratio}")
    return float(ratio)


def _check_mode(value, allowed, what):
    if value not in allowed:
        raise ConfigError(f"{what} must be one of {allowed}, got {value!r}")


def _as_boxes(a):
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1:] != (4,):
        raise ConfigError(f"box arrays need a trailing axis of 4, got shape {a.shape}")
    return a


def _check_boxes(a, what):
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{what}: non-finite box coordinates")
    if np.any(a[..., 2:] <= 0):
        raise ConfigError(f"{what}: box width and height must be positive")


def _corners(boxes, ratio):
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    hw, hh = w * ratio / 2, h * ratio / 2
    return cx - hw, cy - hh, cx + hw, cy + hh


def inner_box(box, ratio):
    """Corner form of ``box`` scaled about its centre by ``ratio``."""
    check_ratio(ratio)
    l, t, r, b = _corners(box.as_array(), ratio)
    return CornerBox(float(l), float(t), float(r), float(b))


def mpd_distances(a, g):
    """Squared top-left and bottom-right corner distances between two boxes."""
    d1 = (g.l - a.l) ** 2 + (g.t - a.t) ** 2
    d2 = (g.r - a.r) ** 2 + (g.b - a.b) ** 2
    return d1, d2


def _overlap(p, g):
    pl, pt, pr, pb = p
    gl, gt, gr, gb = g
    iw = np.maximum(np.minimum(pr, gr) - np.maximum(pl, gl), 0.0)
    ih = np.maximum(np.minimum(pb, gb) - np.maximum(pt, gt), 0.0)
    return iw * ih


def _area(c):
    return (c[2] - c[0]) * (c[3] - c[1])


def inner_terms_batch(pred, gt, ratio=1.0):
    """(inter, union) of the inner boxes, union = r^2 (w h + w_gt h_gt) - inter.

    Areas are taken from the same corner extents as the overlap so that
    identical boxes give inter == union exactly.
    """
    check_ratio(ratio)
    P, G = _corners(_as_boxes(pred), ratio), _corners(_as_boxes(gt), ratio)
    inter = _overlap(P, G)
    return inter, _area(P) + _area(G) - inter


def inner_terms(pred, gt, ratio=1.0):
    inter, union = inner_terms_batch(pred.as_array(), gt.as_array(), ratio)
    return float(inter), float(union)


def inner_mpdiou_batch(pred, gt, img_w, img_h, ratio=1.0, distances="inner"):
    _check_mode(distances, DISTANCE_MODES, "distances")
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    _check_boxes(pred, "pred")
    _check_boxes(gt, "gt")
    inter, union = inner_terms_batch(pred, gt, ratio)
    dr = ratio if distances == "inner" else 1.0
    pl, pt, pr, pb = _corners(pred, dr)
    gl, gt_, gr, gb = _corners(gt, dr)
    d1 = (gl - pl) ** 2 + (gt_ - pt) ** 2
    d2 = (gr - pr) ** 2 + (gb - pb) ** 2
    diag = float(img_w) ** 2 + float(img_h) ** 2
    return np.minimum(inter / union, 1.0) - d1 / diag - d2 / diag


def inner_mpdiou(pred, gt, ctx, distances="inner"):
    """Similarity in (-2, 1]; 1 exactly when pred == gt."""
    v = inner_mpdiou_batch(pred.as_array(), gt.as_array(), ctx.img_w, ctx.img_h,
                           ctx.ratio, distances)
    return float(v)


# -- gradients --------------------------------------------------------------------
#
# Every corner is affine in (cx, cy, w, h), so the derivative of each corner is
# a constant 4-vector. min/max/clamp are differentiated per component; where
# their arguments tie the one-sided derivative for the requested side is used:
# moving a parameter up (side=+1) or down (side=-1).

def _dmin(a, c, da, side):
    tie = np.minimum(da, 0.0) if side > 0 else np.maximum(da, 0.0)
    return np.where(a < c, da, np.where(a > c, 0.0, tie))


def _dmax(a, c, da, side):
    tie = np.maximum(da, 0.0) if side > 0 else np.minimum(da, 0.0)
    return np.where(a > c, da, np.where(a < c, 0.0, tie))


def _dclamp(u, du, side):
    tie = np.maximum(du, 0.0) if side > 0 else np.minimum(du, 0.0)
    return np.where(u > 0, du, np.where(u < 0, 0.0, tie))


def _corner_jac(r):
    """d(l, t, r, b)/d(cx, cy, w, h) for corners scaled by r."""
    return (np.array([1.0, 0.0, -r / 2, 0.0]), np.array([0.0, 1.0, 0.0, -r / 2]),
            np.array([1.0, 0.0, r / 2, 0.0]), np.array([0.0, 1.0, 0.0, r / 2]))


def _value_grad(pred, gt, diag, ratio, distances, side):
    e = (..., None)
    P = [c[e] for c in _corners(pred, ratio)]
    G = [c[e] for c in _corners(gt, ratio)]
    dl, dt, dr, db = _corner_jac(ratio)

    ow = np.minimum(P[2], G[2]) - np.maximum(P[0], G[0])
    dow = _dmin(P[2], G[2], dr, side) - _dmax(P[0], G[0], dl, side)
    oh = np.minimum(P[3], G[3]) - np.maximum(P[1], G[1])
    doh = _dmin(P[3], G[3], db, side) - _dmax(P[1], G[1], dt, side)
    iw, ih = np.maximum(ow, 0.0), np.maximum(oh, 0.0)
    diw, dih = _dclamp(ow, dow, side), _dclamp(oh, doh, side)
    inter = iw * ih
    dinter = diw * ih + iw * dih

    w, h = pred[..., 2:3], pred[..., 3:4]
    area_g = (gt[..., 2:3] * gt[..., 3:4]) * ratio * ratio
    union = w * h * ratio * ratio + area_g - inter
    darea = np.stack([np.zeros_like(w[..., 0]), np.zeros_like(w[..., 0]),
                      h[..., 0] * ratio * ratio, w[..., 0] * ratio * ratio], axis=-1)
    dunion = darea - dinter
    diou = (dinter * union - inter * dunion) / (union * union)

    q = ratio if distances == "inner" else 1.0
    Pd = [c[e] for c in _corners(pred, q)]
    Gd = [c[e] for c in _corners(gt, q)]
    jl, jt, jr, jb = _corner_jac(q)
    dd = (-2 * (Gd[0] - Pd[0]) * jl - 2 * (Gd[1] - Pd[1]) * jt
          - 2 * (Gd[2] - Pd[2]) * jr - 2 * (Gd[3] - Pd[3]) * jb)
    return diou - dd / diag


def inner_mpdiou_loss_grad_batch(pred, gt, img_w, img_h, ratio=1.0, distances="inner",
                                 tie="right"):
    """Loss ``1 - value`` and its gradient w.r.t. pred's (cx, cy, w, h).

    ``tie`` picks the derivative at kinks (edges or overlap boundaries that
    coincide exactly): ``"right"`` is the one-sided derivative for an
    increasing parameter, ``"left"`` for a decreasing one, ``"mean"`` their
    average.
    """
    _check_mode(tie, TIE_MODES, "tie")
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    value = inner_mpdiou_batch(pred, gt, img_w, img_h, ratio, distances)
    diag = float(img_w) ** 2 + float(img_h) ** 2
    if tie == "mean":
        g = 0.5 * (_value_grad(pred, gt, diag, ratio, distances, +1)
                   + _value_grad(pred, gt, diag, ratio, distances, -1))
    else:
        g = _value_grad(pred, gt, diag, ratio, distances, +1 if tie == "right" else -1)
    return 1.0 - value, -g


def inner_mpdiou_loss_grad(pred, gt, ctx, distances="inner", tie="right"):
    loss, grad = inner_mpdiou_loss_grad_batch(pred.as_array(), gt.as_array(), ctx.img_w,
                                              ctx.img_h, ctx.ratio, distances, tie)
    return float(loss), grad


def kink_distance(pred, gt, ratio=1.0):
    """Smallest gap between any pair of edges or overlap extents whose
    crossing makes the loss non-differentiable."""
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    P, G = _corners(pred, ratio), _corners(gt, ratio)
    ow = np.minimum(P[2], G[2]) - np.maximum(P[0], G[0])
    oh = np.minimum(P[3], G[3]) - np.maximum(P[1], G[1])
    gaps = [np.abs(P[i] - G[i]) for i in range(4)] + [np.abs(ow), np.abs(oh)]
    return np.min(np.stack(gaps), axis=0)


# -- baselines ----------------------------------------------------------------------

def iou_batch(a, b):
    inter, union = inner_terms_batch(a, b, 1.0)
    return np.minimum(inter / union, 1.0)


def iou(a, b):
    return float(iou_batch(a.as_array(), b.as_array()))


def ciou_batch(pred, gt):
    """IoU minus centre-distance over enclosing-diagonal minus the aspect term."""
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    i = iou_batch(pred, gt)
    P, G = _corners(pred, 1.0), _corners(gt, 1.0)
    cw = np.maximum(P[2], G[2]) - np.minimum(P[0], G[0])
    ch = np.maximum(P[3], G[3]) - np.minimum(P[1], G[1])
    rho2 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2
    v = (4 / math.pi ** 2) * (np.arctan(gt[..., 2] / gt[..., 3])
                              - np.arctan(pred[..., 2] / pred[..., 3])) ** 2
    denom = (1 - i) + v
    alpha = np.divide(v, denom, out=np.zeros_like(v), where=denom > 0)
    return i - rho2 / (cw * cw + ch * ch) - alpha * v


def ciou(pred, gt, ctx=None):
    """``ctx`` is accepted for call-site symmetry; CIoU does not use image dims."""
    return float(ciou_batch(pred.as_array(), gt.as_array()))


# -- finite-difference harness -------------------------------------------------------

@dataclass(frozen=True)
class GradcheckResult:
    max_rel_err: float
    worst: int
    checked: int
    rejected: int
    errors: np.ndarray

    @property
    def passed(self):
        return self.checked == 0 or self.max_rel_err < 1e-3


def sample_box_pairs(n, seed, img=(100.0, 100.0), overlap=0.7):
    """Seeded (pred, gt) pairs inside an image.

    A fraction ``overlap`` of the preds are jittered copies of their gt (so
    most of those overlap it); the rest are drawn independently.
    """
    rng = SplitMix64(seed)
    W, H = img
    u = rng.random_array(9 * n).reshape(n, 9)
    gw = 2 + u[:, 0] * (W / 2 - 2)
    gh = 2 + u[:, 1] * (H / 2 - 2)
    gcx = gw / 2 + u[:, 2] * (W - gw)
    gcy = gh / 2 + u[:, 3] * (H - gh)
    gt = np.stack([gcx, gcy, gw, gh], axis=1)
    jit = np.stack([gcx + (u[:, 4] - 0.5) * gw, gcy + (u[:, 5] - 0.5) * gh,
                    gw * (0.5 + u[:, 6]), gh * (0.5 + u[:, 7])], axis=1)
    pw = 2 + u[:, 6] * (W / 2 - 2)
    ph = 2 + u[:, 7] * (H / 2 - 2)
    free = np.stack([pw / 2 + u[:, 4] * (W - pw), ph / 2 + u[:, 5] * (H - ph), pw, ph], axis=1)
    pred = np.where((u[:, 8] < overlap)[:, None], jit, free)
    return pred, gt


def _random_configs(n, seed):
    rng = SplitMix64(seed)
    u = rng.random_array(3 * n).reshape(n, 3)
    img_w = 50 + u[:, 0] * 950
    img_h = 50 + u[:, 1] * 950
    ratio = RATIO_MIN + u[:, 2] * (RATIO_MAX - RATIO_MIN)
    return img_w, img_h, ratio


def gradcheck(samples=500, eps=1e-4, seed=0, distances="inner", corrupt=False,
              margin=None):
    """Compare analytic loss gradients with central differences.

    Draws random box pairs, image sizes and ratios; any sample with a kink
    within ``margin`` (default ``10 * eps``) of the evaluation point is
    redrawn, so exactly ``samples`` differentiable configurations are checked.
    Per-sample error is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    ``corrupt`` perturbs the analytic cx-derivative (harness self-test).
    """
    if samples < 0 or not eps > 0:
        raise ConfigError(f"need samples >= 0 and eps > 0, got {samples}, {eps}")
    margin = 10 * eps if margin is None else margin
    errors, rejected, batch = [], 0, 0
    while len(errors) < samples:
        want = max(64, 2 * (samples - len(errors)))
        pred, gt = sample_box_pairs(want, seed + 7919 * batch)
        img_w, img_h, ratio = _random_configs(want, seed + 7919 * batch + 1)
        batch += 1
        for k in range(want):
            if len(errors) == samples:
                break
            if kink_distance(pred[k], gt[k], ratio[k]) <= margin:
                rejected += 1
                continue
            _, g = inner_mpdiou_loss_grad_batch(pred[k], gt[k], img_w[k], img_h[k], ratio[k],
                                                distances)
            if corrupt:
                g = g.copy()
                g[0] += 1e-2 * np.max(np.abs(g))
            num = np.empty(4)
            for j in range(4):
                step = np.zeros(4)
                step[j] = eps
                fp, _ = inner_mpdiou_loss_grad_batch(pred[k] + step, gt[k], img_w[k], img_h[k],
                                                     ratio[k], distances)
                fm, _ = inner_mpdiou_loss_grad_batch(pred[k] - step, gt[k], img_w[k], img_h[k],
                                                     ratio[k], distances)
                num[j] = (fp - fm) / (2 * eps)
            scale = max(np.max(np.abs(g)), np.max(np.abs(num)))
            errors.append(0.0 if scale == 0 else float(np.max(np.abs(g - num)) / scale))
    errors = np.asarray(errors)
    if len(errors) == 0:
        return GradcheckResult(0.0, -1, 0, rejected, errors)
    worst = int(np.argmax(errors))
    return GradcheckResult(float(errors[worst]), worst, len(errors), rejected, errors)
