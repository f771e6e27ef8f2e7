"""Online one-pass tracking loop.

Coordinates are continuous image coordinates: pixel ``i`` spans ``[i, i+1)``
and boxes are ``(x, y, w, h)`` with ``(x, y)`` the top-left corner.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .model import SiamIVFN, ablate
from .numkernel import Tensor
from .trackhead import MapGeometry

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    template_size: int = 127
    search_size: int = 255
    context: float = 0.5
    window_weight: float = 0.30
    smoothing: float = 0.3
    min_score: float = 0.0
    min_size: float = 4.0


@dataclass
class FrameResult:
    index: int
    box: tuple[float, float, float, float]
    score: float


@dataclass
class TrackerState:
    template: Tensor
    center: tuple[float, float]
    size: tuple[float, float]
    window: np.ndarray
    frame_size: tuple[int, int]      # (width, height)
    config: TrackerConfig
    contribution: np.ndarray | None = None


# --------------------------------------------------------------------------- cropping


def context_side(w: float, h: float, context: float) -> float:
    """Side of the square template crop around a ``w x h`` box."""
    pad = context * (w + h)
    return math.sqrt((w + pad) * (h + pad))


def _sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``img`` (C, H, W) at pixel-index coordinates; outside -> ``fill``."""
    c, h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(img.dtype)
    fy = (ys - y0).astype(img.dtype)

    def gather(yi, xi):
        vy = (yi >= 0) & (yi < h)
        vx = (xi >= 0) & (xi < w)
        vals = img[:, np.clip(yi, 0, h - 1)][:, :, np.clip(xi, 0, w - 1)]
        ok = vy[:, None] & vx[None, :]
        return np.where(ok[None], vals, fill[:, None, None])

    top = gather(y0, x0) * (1 - fx) + gather(y0, x0 + 1) * fx
    bottom = gather(y0 + 1, x0) * (1 - fx) + gather(y0 + 1, x0 + 1) * fx
    return top * (1 - fy)[None, :, None] + bottom * fy[None, :, None]


def crop_region(frame_pair, center, side: float, out_size: int):
    """Square crop of side ``side`` around ``center`` from both modalities, resized to ``out_size``.

    Out-of-frame samples take the per-channel frame mean.
    """
    if side <= 0:
        raise ValueError(f"crop side must be positive, got {side}")
    cx, cy = center
    step = side / out_size
    # output pixel j has continuous centre cx - side/2 + (j + 0.5) * step; minus 0.5 -> index coords
    grid = (np.arange(out_size) + 0.5) * step - side / 2 - 0.5
    xs, ys = cx + grid, cy + grid
    out = []
    for img in frame_pair:
        fill = img.mean(axis=(1, 2))
        out.append(_sample(img, ys, xs, fill).astype(img.dtype))
    return tuple(out)


def cosine_window(size: int) -> np.ndarray:
    w = np.hanning(size + 2)[1:-1]
    return np.outer(w, w)


# --------------------------------------------------------------------------- tracker


class SiamTracker:
    def __init__(self, model: SiamIVFN, config: TrackerConfig | None = None, mode: str = "fused"):
        self.config = config or TrackerConfig()
        self.mode = mode
        self.model = ablate(model, mode)
        self.geometry: MapGeometry = self.model.geometry(self.config.template_size,
                                                         self.config.search_size)
        self.state: TrackerState | None = None

    def _features(self, frame_pair, center, side, size):
        rgb, t = crop_region(frame_pair, center, side, size)
        rgb, t = self.model.prepare_inputs(rgb[None], t[None], self.mode)
        with nk.no_grad():
            return self.model.features(rgb, t)

    def init(self, frame_pair, box) -> TrackerState:
        x, y, w, h = (float(v) for v in box)
        height, width = frame_pair[0].shape[1:]
        if w <= 0 or h <= 0 or x + w <= 0 or y + h <= 0 or x >= width or y >= height:
            raise ValueError(f"initial box {tuple(box)} lies outside the {width}x{height} frame")
        cfg = self.config
        center = (x + w / 2, y + h / 2)
        z, _ = self._features(frame_pair, center, context_side(w, h, cfg.context),
                              cfg.template_size)
        self.state = TrackerState(z, center, (w, h), cosine_window(self.geometry.size),
                                  (width, height), cfg)
        return self.state

    def update(self, frame_pair, index: int = 0) -> FrameResult:
        st = self.state
        if st is None:
            raise RuntimeError("tracker used before init")
        cfg = self.config
        w, h = st.size
        side_x = context_side(w, h, cfg.context) * cfg.search_size / cfg.template_size
        x, hx = self._features(frame_pair, st.center, side_x, cfg.search_size)
        with nk.no_grad():
            out, combined = self.model.forward_features(st.template, x)
        st.contribution = hx.data[0]
        score = nk._sigmoid(combined.data[0, 0].astype(np.float64))
        penalized = (1 - cfg.window_weight) * score + cfg.window_weight * st.window
        v, u = np.unravel_index(int(np.argmax(penalized)), penalized.shape)
        peak = float(score[v, u])

        px, py = self.geometry.to_image(u, v)
        l, t, r, b = (float(s) for s in out.reg.data[0, :, v, u])
        scale = side_x / cfg.search_size
        x0, y0 = st.center[0] - side_x / 2, st.center[1] - side_x / 2
        bx1, by1 = x0 + (px - l) * scale, y0 + (py - t) * scale
        bx2, by2 = x0 + (px + r) * scale, y0 + (py + b) * scale
        pw, ph = bx2 - bx1, by2 - by1
        ok = all(math.isfinite(v_) for v_ in (bx1, by1, bx2, by2)) and pw >= 1 and ph >= 1
        if not ok:
            log.warning("frame %d: degenerate decoded box, keeping previous box", index)
        elif peak < cfg.min_score:
            log.info("frame %d: peak score %.3f below %.3f, keeping previous box",
                     index, peak, cfg.min_score)
        else:
            # size adapts in proportion to confidence, so weak peaks barely rescale
            lam = cfg.smoothing * peak
            st.center = ((bx1 + bx2) / 2, (by1 + by2) / 2)
            st.size = ((1 - lam) * w + lam * pw, (1 - lam) * h + lam * ph)
        self._clamp()
        return FrameResult(index, self.box(), peak)

    def _clamp(self) -> None:
        st = self.state
        fw, fh = st.frame_size
        m = self.config.min_size
        w = min(max(st.size[0], m), fw)
        h = min(max(st.size[1], m), fh)
        cx = min(max(st.center[0], w / 2), fw - w / 2)
        cy = min(max(st.center[1], h / 2), fh - h / 2)
        st.center, st.size = (cx, cy), (w, h)

    def box(self) -> tuple[float, float, float, float]:
        st = self.state
        return (st.center[0] - st.size[0] / 2, st.center[1] - st.size[1] / 2,
                st.size[0], st.size[1])


def track_sequence(model: SiamIVFN, sequence, config: TrackerConfig | None = None,
                   mode: str = "fused", contributions: list | None = None) -> list[FrameResult]:
    """One-pass evaluation: initialise on frame 0's visible ground truth, never re-initialise.

    Only ``sequence.init_box()`` is read; no later ground truth reaches the tracker.
    """
    tracker = SiamTracker(model, config, mode)
    n = len(sequence)
    if n < 1:
        raise ValueError("sequence has no frames")
    init_box = tuple(float(v) for v in sequence.init_box())
    tracker.init(sequence.frame_pair(0), init_box)
    results = [FrameResult(0, init_box, 1.0)]
    for t in range(1, n):
        try:
            pair = sequence.frame_pair(t)
        except Exception as exc:  # noqa: BLE001 - any read failure aborts with the frame index
            raise IOError(f"frame {t}: cannot read ({exc})") from exc
        results.append(tracker.update(pair, t))
        if contributions is not None:
            contributions.append(tracker.state.contribution.copy())
    return results


def write_results(path, results: list[FrameResult]) -> None:
    lines = [f"{r.index},{r.box[0]:.3f},{r.box[1]:.3f},{r.box[2]:.3f},{r.box[3]:.3f}"
             for r in results]
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> np.ndarray:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{n}: expected frame_index,x,y,w,h")
        rows.append([float(p) for p in parts[1:]])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_contributions(path, rows: list[np.ndarray], start: int = 1) -> None:
    with open(path, "w") as fh:
        for i, h in enumerate(rows, start=start):
            fh.write(",".join([str(i)] + [f"{v:.6f}" for v in h]) + "\n")
