"""Anchor-free siamese head: depthwise correlation, cls/quality/regression branches, losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .numkernel import ParamStore, Tensor

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
IOU_FLOOR = 1e-6


class HeadParams:
    """1x1 reduction, two 3x3 towers, 1x1 outputs and the 1x1 score combiner."""

    def __init__(self, store: ParamStore, in_channels: int, width: int = 16,
                 tower_layers: int = 2, seed: int = 0, prefix: str = "head",
                 prior: float = 0.01, reg_init: float = math.log(4.0)):
        rng = np.random.default_rng(seed)
        self.width = width
        self.tower_layers = tower_layers
        self.prefix = prefix

        def conv(name, o, i, k, bias=0.0, gain=2.0):
            bound = math.sqrt(3.0 * gain / (i * k * k))
            w = store.add(f"{prefix}.{name}.w", rng.uniform(-bound, bound, (o, i, k, k)))
            b = store.add(f"{prefix}.{name}.b", np.full(o, bias))
            return w, b

        self.reduce = conv("reduce", width, in_channels, 1, gain=0.25)
        self.cls_tower = [conv(f"cls_tower{j + 1}", width, width, 3) for j in range(tower_layers)]
        self.reg_tower = [conv(f"reg_tower{j + 1}", width, width, 3) for j in range(tower_layers)]
        self.cls_out = conv("cls_out", 1, width, 1, bias=-math.log((1 - prior) / prior), gain=0.1)
        self.quality_out = conv("quality_out", 1, width, 1, gain=0.1)
        self.reg_out = conv("reg_out", 4, width, 1, bias=reg_init, gain=0.1)
        self.combine = store.add(f"{prefix}.combine.w", np.array([[[[1.0]], [[0.0]]]]))
        self.combine_b = store.add(f"{prefix}.combine.b", np.zeros(1))


@dataclass
class HeadOutput:
    cls: Tensor        # (N, 1, H, W) logits
    quality: Tensor    # (N, 1, H, W) logits
    reg_raw: Tensor    # (N, 4, H, W)
    reg: Tensor        # (N, 4, H, W) side distances in crop pixels, stride * exp(raw)
    combined: Tensor | None = None


def head_forward(params: HeadParams, fused_template: Tensor, fused_search: Tensor,
                 stride: float) -> HeadOutput:
    if (fused_template.shape[2] >= fused_search.shape[2]
            or fused_template.shape[3] >= fused_search.shape[3]):
        raise ValueError(f"template features {fused_template.shape} must be smaller than"
                         f" search features {fused_search.shape}")
    rz = nk.conv2d(fused_template, *params.reduce)
    rx = nk.conv2d(fused_search, *params.reduce)
    # Mean rather than sum over the template window keeps the towers' input scale fixed.
    corr = nk.scale(nk.depthwise_xcorr(rz, rx), 1.0 / (rz.shape[2] * rz.shape[3]))
    c = corr
    for w, b in params.cls_tower:
        c = nk.relu(nk.conv2d(c, w, b))
    r = corr
    for w, b in params.reg_tower:
        r = nk.relu(nk.conv2d(r, w, b))
    cls = nk.conv2d(c, *params.cls_out)
    quality = nk.conv2d(c, *params.quality_out)
    raw = nk.conv2d(r, *params.reg_out)
    reg = nk.scale(nk.exp(raw), float(stride))
    return HeadOutput(cls, quality, raw, reg)


def combine_scores(cls: Tensor, quality: Tensor, weights: Tensor, bias: Tensor | None = None
                   ) -> Tensor:
    """1x1 conv over the stacked (cls, quality) maps."""
    if cls.shape != quality.shape:
        raise ValueError(f"combine_scores: shapes differ: {cls.shape} vs {quality.shape}")
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights).reshape(1, 2, 1, 1))
    return nk.conv2d(nk.concat([cls, quality], axis=1), w, bias)


# --------------------------------------------------------------------------- geometry


@dataclass(frozen=True)
class MapGeometry:
    """Map cell ``(u, v)`` (column, row) sits at crop pixel ``(offset + u*stride, offset + v*stride)``."""

    stride: float
    offset: float
    size: int

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        coords = self.offset + self.stride * np.arange(self.size)
        xs, ys = np.meshgrid(coords, coords)
        return xs, ys

    def to_image(self, u: float, v: float) -> tuple[float, float]:
        return self.offset + u * self.stride, self.offset + v * self.stride

    def to_map(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.offset) / self.stride, (y - self.offset) / self.stride


@dataclass
class TargetAssignment:
    labels: np.ndarray      # (H, W) in {POSITIVE, NEGATIVE, IGNORE}
    quality: np.ndarray     # (H, W); meaningful on positives
    sides: np.ndarray       # (H, W, 4) true (l, t, r, b); meaningful on positives
    points: np.ndarray      # (H, W, 2) crop-pixel (x, y) of every cell

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def _side_distances(x, y, box):
    bx, by, bw, bh = box
    return x - bx, y - by, bx + bw - x, by + bh - y


def centerness(l, t, r, b):
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def assign_targets(gt_box, geometry: MapGeometry, shrink: float = 0.5) -> TargetAssignment:
    """Label every map cell against ``gt_box`` = (x, y, w, h) in crop pixels.

    Positive inside the box shrunk by ``shrink`` about its centre (boundary
    inclusive), negative outside the full box, ignored in between.
    """
    bx, by, bw, bh = (float(v) for v in gt_box)
    if bw <= 1 or bh <= 1:
        raise ValueError(f"degenerate ground-truth box {tuple(gt_box)}")
    xs, ys = geometry.points()
    l, t, r, b = _side_distances(xs, ys, (bx, by, bw, bh))
    inside = (l >= 0) & (t >= 0) & (r >= 0) & (b >= 0)
    cx, cy = bx + bw / 2, by + bh / 2
    core = (np.abs(xs - cx) <= shrink * bw / 2) & (np.abs(ys - cy) <= shrink * bh / 2)
    labels = np.full(xs.shape, IGNORE, dtype=np.int8)
    labels[~inside] = NEGATIVE
    labels[core & inside] = POSITIVE
    sides = np.stack([l, t, r, b], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        quality = np.where(labels == POSITIVE, centerness(l, t, r, b), 0.0)
    return TargetAssignment(labels, quality, sides, np.stack([xs, ys], axis=-1))


def negative_assignment(geometry: MapGeometry) -> TargetAssignment:
    xs, ys = geometry.points()
    shape = xs.shape
    return TargetAssignment(np.full(shape, NEGATIVE, dtype=np.int8), np.zeros(shape),
                            np.zeros(shape + (4,)), np.stack([xs, ys], axis=-1))


def _stack_labels(assignments) -> np.ndarray:
    if isinstance(assignments, TargetAssignment):
        assignments = [assignments]
    return np.stack([a.labels for a in assignments])


# --------------------------------------------------------------------------- losses


def focal_loss(logits: Tensor, assignments, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss over positive and negative cells, / max(1, #positives).

    ``logits`` has shape (N, 1, H, W) (or (H, W) for a single map) and
    ``assignments`` is one TargetAssignment per batch item.
    """
    labels = _stack_labels(assignments).reshape(logits.shape)
    counted = labels != IGNORE
    sign = np.where(labels == POSITIVE, 1.0, -1.0)
    alpha_t = np.where(labels == POSITIVE, alpha, 1.0 - alpha)
    z = sign * logits.data
    log_pt = -np.logaddexp(0.0, -z)
    pt = np.exp(log_pt)
    one_minus = np.exp(-np.logaddexp(0.0, z))
    norm = max(1, int((labels == POSITIVE).sum()))
    per = -alpha_t * one_minus ** gamma * log_pt
    value = np.where(counted, per, 0.0).sum() / norm

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = gamma * pt * one_minus ** gamma * log_pt - one_minus ** (gamma + 1)
        d = np.where(counted, sign * alpha_t * d, 0.0) / norm
        nk.accumulate(logits, (g * d).astype(logits.data.dtype))

    return nk.record(np.asarray(value, dtype=logits.data.dtype), (logits,), backward, "focal_loss")


def quality_loss(logits: Tensor, assignments) -> Tensor:
    """Mean BCE between sigmoid(logit) and the centerness target over positives."""
    if isinstance(assignments, TargetAssignment):
        assignments = [assignments]
    labels = _stack_labels(assignments).reshape(logits.shape)
    target = np.stack([a.quality for a in assignments]).reshape(logits.shape)
    pos = labels == POSITIVE
    n = int(pos.sum())
    x = logits.data
    if n == 0:
        return nk.record(np.asarray(0.0, dtype=x.dtype), (logits,), lambda g: None, "quality_loss")
    per = np.logaddexp(0.0, x) - target * x
    value = per[pos].sum() / n

    def backward(g):
        d = np.where(pos, nk._sigmoid(x) - target, 0.0) / n
        nk.accumulate(logits, (g * d).astype(x.dtype))

    return nk.record(np.asarray(value, dtype=x.dtype), (logits,), backward, "quality_loss")


def _iou_terms(p: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed ``-ln(max(IoU, floor))`` over xyxy box rows and its gradient w.r.t. ``p``."""
    ix1, iy1 = np.maximum(p[:, 0], q[:, 0]), np.maximum(p[:, 1], q[:, 1])
    ix2, iy2 = np.minimum(p[:, 2], q[:, 2]), np.minimum(p[:, 3], q[:, 3])
    iw, ih = np.maximum(0.0, ix2 - ix1), np.maximum(0.0, iy2 - iy1)
    inter = iw * ih
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    area_q = (q[:, 2] - q[:, 0]) * (q[:, 3] - q[:, 1])
    union = pw * ph + area_q - inter
    iou = inter / union
    clamped = iou < IOU_FLOOR
    value = float(-np.log(np.maximum(iou, IOU_FLOOR)).sum())
    # loss = -ln I + ln U, U = Ap + Aq - I
    dI = np.zeros_like(p)
    w_on, h_on = iw > 0, ih > 0
    dI[:, 0] = -ih * (w_on & (p[:, 0] > q[:, 0]))
    dI[:, 2] = ih * (w_on & (p[:, 2] < q[:, 2]))
    dI[:, 1] = -iw * (h_on & (p[:, 1] > q[:, 1]))
    dI[:, 3] = iw * (h_on & (p[:, 3] < q[:, 3]))
    dU = np.stack([-ph, -pw, ph, pw], axis=1) - dI
    with np.errstate(divide="ignore", invalid="ignore"):
        grad = -dI / inter[:, None] + dU / union[:, None]
    grad[clamped] = 0.0
    return value, grad


def box_iou_loss(pred: Tensor, target) -> Tensor:
    """Mean ``-ln(max(IoU, 1e-6))`` between (P, 4) predicted and target xyxy boxes."""
    p = pred.data.astype(np.float64)
    q = np.asarray(target, dtype=np.float64).reshape(p.shape)
    n = p.shape[0]
    if n == 0:
        return nk.record(np.asarray(0.0, dtype=pred.data.dtype), (pred,), lambda g: None,
                         "iou_loss")
    value, grad = _iou_terms(p, q)
    return nk.record(np.asarray(value / n, dtype=pred.data.dtype), (pred,),
                     lambda g: nk.accumulate(pred, (g * grad / n).astype(pred.data.dtype)),
                     "iou_loss")


def iou_loss(reg: Tensor, assignments) -> Tensor:
    """IoU loss between decoded side distances (N, 4, H, W) and targets at positives.

    Boxes are rebuilt around each positive cell's crop point as
    ``(x - l, y - t, x + r, y + b)``.
    """
    if isinstance(assignments, TargetAssignment):
        assignments = [assignments]
    pos = _stack_labels(assignments) == POSITIVE               # (N, H, W)
    if not pos.any():
        return nk.record(np.asarray(0.0, dtype=reg.data.dtype), (reg,), lambda g: None,
                         "iou_loss")
    sides = np.stack([a.sides for a in assignments])[pos]       # (P, 4)
    points = np.stack([a.points for a in assignments])[pos]     # (P, 2)
    n_idx, y_idx, x_idx = np.nonzero(pos)
    pred_sides = reg.data[n_idx, :, y_idx, x_idx].astype(np.float64)
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    anchor = np.concatenate([points, points], axis=1)
    value, grad = _iou_terms(anchor + sign * pred_sides, anchor + sign * sides)
    n = len(n_idx)

    def backward(g):
        full = np.zeros(reg.shape, dtype=np.float64)
        full[n_idx, :, y_idx, x_idx] = g * grad * sign / n
        nk.accumulate(reg, full.astype(reg.data.dtype))

    return nk.record(np.asarray(value / n, dtype=reg.data.dtype), (reg,), backward, "iou_loss")


def total_loss(cls_loss: Tensor, quality: Tensor, reg: Tensor,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    if any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    wc, wq, wr = weights
    return nk.add(nk.add(nk.scale(cls_loss, wc), nk.scale(quality, wq)), nk.scale(reg, wr))
