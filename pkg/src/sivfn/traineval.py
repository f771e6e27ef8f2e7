"""Training (surrogate pretraining, staged fine-tuning) and one-pass evaluation."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .model import SiamIVFN, luminance
from .synthdata import TAGS, Sequence
from .trackhead import assign_targets, negative_assignment
from .tracker import TrackerConfig, context_side, crop_region, track_sequence

log = logging.getLogger(__name__)

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SR_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0
REPORT_THRESHOLDS = (5, 20)
REFERENCE_FPS = 147.6

# Trainable groups per fine-tuning stage; the last stage unfreezes everything.
STAGE_GROUPS = (
    ("can", "head"),
    ("can", "head", "thermal"),
    ("can", "head", "thermal", "shared"),
    ("can", "head", "thermal", "shared", "rgb"),
)


class NumericError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 8
    steps_per_epoch: int = 25
    batch_size: int = 8
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_start: float = 0.08
    lr_end: float = 1e-6
    stage_boundaries: tuple[int, ...] = (10, 20, 30)
    max_gap: int = 1000
    pos_neg_ratio: float = 0.5
    center_jitter: float = 0.25     # fraction of the target size, uniform per axis
    scale_jitter: float = 0.3       # log-uniform search-scale perturbation
    grad_clip: float = 10.0         # global gradient-norm clip; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        b = self.stage_boundaries
        if len(b) != len(STAGE_GROUPS) - 1 or any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError(f"stage boundaries must be {len(STAGE_GROUPS) - 1} strictly"
                             f" increasing epochs, got {b}")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
        if self.pos_neg_ratio <= 0:
            raise ValueError("pos_neg_ratio must be positive")

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        params = dict(phase="finetune", optimizer="adam", weight_decay=0.0, lr_start=8e-5,
                      lr_end=1e-6)
        params.update(overrides)
        return cls(**params)


# --------------------------------------------------------------------------- sampling


@dataclass
class TrainingPair:
    template: tuple[np.ndarray, np.ndarray]
    search: tuple[np.ndarray, np.ndarray]
    positive: bool
    box: tuple[float, float, float, float] | None   # gt in search-crop pixels, positives only
    frames: tuple[tuple[int, int], tuple[int, int]]  # (sequence, frame) for template and search


def _center(box) -> tuple[float, float]:
    return box[0] + box[2] / 2, box[1] + box[3] / 2


def _crop_template(seq: Sequence, t: int, tracker: TrackerConfig):
    box = seq.gt_visible[t]
    side = context_side(box[2], box[3], tracker.context)
    return crop_region(seq.frame_pair(t), _center(box), side, tracker.template_size)


def _crop_search(seq: Sequence, t: int, tracker: TrackerConfig, config: TrainConfig, rng,
                 positive: bool):
    box = seq.gt_visible[t]
    x, y, w, h = (float(v) for v in box)
    cx, cy = _center(box)
    jx, jy = rng.uniform(-config.center_jitter, config.center_jitter, size=2)
    s = math.exp(rng.uniform(-config.scale_jitter, config.scale_jitter))
    side = context_side(w, h, tracker.context) * s * tracker.search_size / tracker.template_size
    center = (cx + jx * w, cy + jy * h)
    crops = crop_region(seq.frame_pair(t), center, side, tracker.search_size)
    if not positive:
        return crops, None
    k = tracker.search_size / side
    x0, y0 = center[0] - side / 2, center[1] - side / 2
    return crops, ((x - x0) * k, (y - y0) * k, w * k, h * k)


def sample_pair(dataset: list[Sequence], config: TrainConfig, rng: np.random.Generator,
                tracker: TrackerConfig | None = None) -> TrainingPair:
    """Draw one pair: positive with probability ``r / (1 + r)`` for ``r = pos_neg_ratio``.

    Positives take two frames at most ``max_gap`` apart from one sequence.
    Negatives pair a template with a search crop around another sequence's
    target.  Sequences shorter than two frames never yield positives; with a
    single sequence no negative exists and a positive is drawn instead.
    """
    if not dataset:
        raise ValueError("cannot sample pairs from an empty dataset")
    tracker = tracker or TrackerConfig()
    p_pos = config.pos_neg_ratio / (1.0 + config.pos_neg_ratio)
    positive = rng.uniform() < p_pos or len(dataset) < 2
    if positive:
        eligible = [i for i, s in enumerate(dataset) if len(s) >= 2]
        if not eligible:
            raise ValueError("no sequence has the two frames a positive pair needs")
        si = eligible[rng.integers(len(eligible))]
        n = len(dataset[si])
        a = int(rng.integers(n))
        lo, hi = max(0, a - config.max_gap), min(n - 1, a + config.max_gap)
        b = int(rng.integers(lo, hi))
        b += b >= a  # skip a itself; b stays within [lo, hi]
        sj = si
    else:
        si, sj = (int(v) for v in rng.choice(len(dataset), size=2, replace=False))
        a = int(rng.integers(len(dataset[si])))
        b = int(rng.integers(len(dataset[sj])))
    template = _crop_template(dataset[si], a, tracker)
    search, box = _crop_search(dataset[sj], b, tracker, config, rng, positive)
    return TrainingPair(template, search, positive, box, ((si, a), (sj, b)))


# --------------------------------------------------------------------------- optimisation


def cosine_lr(t: int, total: int, lr_start: float, lr_end: float) -> float:
    if total <= 0:
        raise ValueError("cosine schedule needs a positive step count")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside 0..{total}")
    return lr_end + (lr_start - lr_end) * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class OptimizerState:
    slots: dict[str, dict] = field(default_factory=dict)


def optimizer_step(store: nk.ParamStore, kind: str, lr: float, hyper: dict | None = None,
                   state: OptimizerState | None = None) -> OptimizerState:
    """One in-place update of every trainable slot that holds a gradient.

    ``sgd_momentum``: ``v <- mu v + g + wd w``; ``w <- w - lr v``.
    ``adam``: bias-corrected moments, one step counter per slot, L2 ``wd w``
    folded into the gradient.
    """
    hyper = hyper or {}
    state = state if state is not None else OptimizerState()
    mu = hyper.get("momentum", 0.9)
    wd = hyper.get("weight_decay", 0.0)
    b1, b2, eps = hyper.get("beta1", 0.9), hyper.get("beta2", 0.999), hyper.get("eps", 1e-8)
    for name, p in store.items():
        if not store.is_trainable(name) or p.grad is None:
            continue
        g = p.grad.astype(np.float64) + wd * p.data
        slot = state.slots.setdefault(name, {})
        if kind == "sgd_momentum":
            v = slot["v"] = mu * slot.get("v", 0.0) + g
            p.data -= (lr * v).astype(p.data.dtype)
        elif kind == "adam":
            n = slot["t"] = slot.get("t", 0) + 1
            m = slot["m"] = b1 * slot.get("m", 0.0) + (1 - b1) * g
            s = slot["s"] = b2 * slot.get("s", 0.0) + (1 - b2) * g * g
            step = lr * (m / (1 - b1 ** n)) / (np.sqrt(s / (1 - b2 ** n)) + eps)
            p.data -= step.astype(p.data.dtype)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")
    return state


def _clip_gradients(store: nk.ParamStore, max_norm: float) -> float:
    grads = [p.grad for n, p in store.items() if store.is_trainable(n) and p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------------------- staging


def stage_index(epoch: int, boundaries) -> int:
    return sum(epoch >= b for b in boundaries)


def parameter_groups(model: SiamIVFN) -> dict[str, list[str]]:
    groups = model.backbone.param_groups()
    groups["can"] = [n for n in model.store.names() if n.startswith(model.can.prefix + ".")]
    groups["head"] = [n for n in model.store.names() if n.startswith(model.head.prefix + ".")]
    return groups


def trainable_groups(epoch: int, boundaries=(10, 20, 30)) -> tuple[str, ...]:
    return STAGE_GROUPS[stage_index(epoch, boundaries)]


def apply_stage(model: SiamIVFN, epoch: int, boundaries=(10, 20, 30)) -> tuple[str, ...]:
    active = trainable_groups(epoch, boundaries)
    groups = parameter_groups(model)
    on = {n for g in active for n in groups[g]}
    model.store.set_trainable_where(lambda name: name in on)
    return active


# --------------------------------------------------------------------------- training


def _batch(pairs: list[TrainingPair], surrogate: bool):
    z_rgb = np.stack([p.template[0] for p in pairs])
    x_rgb = np.stack([p.search[0] for p in pairs])
    if surrogate:
        z_t, x_t = luminance(z_rgb), luminance(x_rgb)
    else:
        z_t = np.stack([p.template[1] for p in pairs])
        x_t = np.stack([p.search[1] for p in pairs])
    dt = nk.get_dtype()
    return [a.astype(dt) for a in (z_rgb, z_t, x_rgb, x_t)]


def train(model: SiamIVFN, dataset: list[Sequence], config: TrainConfig,
          tracker: TrackerConfig | None = None, surrogate: bool | None = None,
          on_step=None) -> list[float]:
    """Run ``config.epochs * config.steps_per_epoch`` steps; returns the per-step loss.

    ``surrogate`` (default: pretraining) replaces the thermal input by the
    luminance of the visible crop.  Fine-tuning applies the staged unfreezing
    schedule at each epoch start.
    """
    config.validate()
    tracker = tracker or TrackerConfig()
    surrogate = config.phase == "pretrain" if surrogate is None else surrogate
    geometry = model.geometry(tracker.template_size, tracker.search_size)
    rng = np.random.default_rng(config.seed)
    hyper = {"momentum": config.momentum, "weight_decay": config.weight_decay}
    state = OptimizerState()
    total = config.epochs * config.steps_per_epoch
    losses = []
    if config.phase == "pretrain":
        model.store.set_trainable_where(lambda name: True)
    for step in range(total):
        epoch = step // config.steps_per_epoch
        if config.phase == "finetune" and step % config.steps_per_epoch == 0:
            active = apply_stage(model, epoch, config.stage_boundaries)
            log.info("epoch %d: training %s", epoch, ",".join(active))
        lr = cosine_lr(step, total, config.lr_start, config.lr_end)
        pairs = [sample_pair(dataset, config, rng, tracker) for _ in range(config.batch_size)]
        assignments = [assign_targets(p.box, geometry) if p.positive
                       else negative_assignment(geometry) for p in pairs]
        with nk.Tape() as tape:
            out = model.forward(*_batch(pairs, surrogate))
            loss, parts = model.loss(out, assignments)
        if not math.isfinite(parts["total"]):
            raise NumericError(f"step {step}: non-finite loss {parts}")
        model.store.zero_grad()
        tape.backward(loss)
        _clip_gradients(model.store, config.grad_clip)
        optimizer_step(model.store, config.optimizer, lr, hyper, state)
        losses.append(parts["total"])
        if on_step is not None:
            on_step(step, lr, parts)
        if step % 25 == 0 or step == total - 1:
            log.info("step %d/%d lr %.2e loss %.4f (cls %.4f q %.4f reg %.4f)", step, total,
                     lr, parts["total"], parts["cls"], parts["quality"], parts["reg"])
    model.store.set_trainable_where(lambda name: True)
    return losses


def pretrain(model: SiamIVFN, dataset: list[Sequence], config: TrainConfig | None = None,
             tracker: TrackerConfig | None = None) -> list[float]:
    """Visible-only training; the thermal stream sees the grayscale surrogate."""
    config = config or TrainConfig()
    return train(model, dataset, config, tracker, surrogate=True)


def finetune_staged(model: SiamIVFN, dataset: list[Sequence], config: TrainConfig | None = None,
                    tracker: TrackerConfig | None = None) -> list[float]:
    config = config or TrainConfig.finetune()
    return train(model, dataset, config, tracker, surrogate=False)


# --------------------------------------------------------------------------- metrics


def _check_counts(results, gt) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(results, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if len(r) != len(g):
        raise ValueError(f"{len(r)} result boxes but {len(g)} ground-truth boxes")
    return r, g


def center_errors(results, gt) -> np.ndarray:
    r, g = _check_counts(results, gt)
    return np.hypot((r[:, 0] + r[:, 2] / 2) - (g[:, 0] + g[:, 2] / 2),
                    (r[:, 1] + r[:, 3] / 2) - (g[:, 1] + g[:, 3] / 2))


def overlaps(results, gt) -> np.ndarray:
    r, g = _check_counts(results, gt)
    # Areas come from the same rounded corners as the intersection, so identical
    # boxes give exactly 1 and no overlap exceeds 1.
    r1, r2 = r[:, :2], r[:, :2] + r[:, 2:]
    g1, g2 = g[:, :2], g[:, :2] + g[:, 2:]
    side = np.clip(np.minimum(r2, g2) - np.maximum(r1, g1), 0, None)
    inter = side[:, 0] * side[:, 1]
    union = np.prod(r2 - r1, axis=1) + np.prod(g2 - g1, axis=1) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def precision_from_errors(errors: np.ndarray, thresholds=PR_THRESHOLDS) -> np.ndarray:
    if len(errors) == 0:
        return np.zeros(len(thresholds))
    return (errors[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def success_from_overlaps(iou: np.ndarray, thresholds=SR_THRESHOLDS) -> np.ndarray:
    if len(iou) == 0:
        return np.zeros(len(thresholds))
    return (iou[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)


def precision_curve(results, gt, thresholds=PR_THRESHOLDS) -> tuple[np.ndarray, dict[int, float]]:
    """Fraction of frames with centre error <= tau, and the values at the report thresholds."""
    curve = precision_from_errors(center_errors(results, gt), thresholds)
    report = {t: float(curve[list(thresholds).index(t)]) for t in REPORT_THRESHOLDS
              if t in list(thresholds)}
    return curve, report


def success_auc(results, gt, thresholds=SR_THRESHOLDS) -> tuple[np.ndarray, float]:
    """Fraction of frames with IoU strictly above tau; AUC is the mean over thresholds."""
    curve = success_from_overlaps(overlaps(results, gt), thresholds)
    return curve, float(curve.mean())


@dataclass
class SequenceResult:
    name: str
    boxes: np.ndarray
    gt: np.ndarray
    tags: list[str]
    seconds: float = 0.0

    @property
    def errors(self) -> np.ndarray:
        return center_errors(self.boxes, self.gt)

    @property
    def overlaps(self) -> np.ndarray:
        return overlaps(self.boxes, self.gt)


@dataclass
class PoolMetrics:
    frames: int
    precision: np.ndarray
    success: np.ndarray

    @property
    def pr(self) -> dict[int, float]:
        return {t: float(self.precision[t]) for t in REPORT_THRESHOLDS}

    @property
    def auc(self) -> float:
        return float(self.success.mean())


def pool_metrics(seqs: list[SequenceResult]) -> PoolMetrics:
    if seqs:
        err = np.concatenate([s.errors for s in seqs])
        iou = np.concatenate([s.overlaps for s in seqs])
    else:
        err = iou = np.zeros(0)
    return PoolMetrics(len(err), precision_from_errors(err), success_from_overlaps(iou))


def attribute_report(seqs: list[SequenceResult]) -> dict[str, PoolMetrics]:
    """Frames pooled per tag in canonical order (tags without sequences omitted), then ALL."""
    for s in seqs:
        unknown = [t for t in s.tags if t not in TAGS]
        if unknown:
            raise ValueError(f"sequence {s.name}: unknown attribute tag(s) {unknown}")
    table = {}
    for tag in TAGS:
        members = [s for s in seqs if tag in s.tags]
        if members:
            table[tag] = pool_metrics(members)
    table["ALL"] = pool_metrics(seqs)
    return table


@dataclass
class OpeResult:
    sequences: list[SequenceResult]
    overall: PoolMetrics
    attributes: dict[str, PoolMetrics]
    fps: float

    @property
    def auc(self) -> float:
        return self.overall.auc

    @property
    def pr(self) -> dict[int, float]:
        return self.overall.pr


def _track_one(model, seq: Sequence, tracker: TrackerConfig, mode: str) -> SequenceResult:
    t0 = time.perf_counter()
    results = track_sequence(model, seq, tracker, mode)
    dt = time.perf_counter() - t0
    return SequenceResult(seq.name, np.array([r.box for r in results]), seq.gt_visible,
                          list(seq.tags), dt)


def run_ope(model: SiamIVFN, sequences: list[Sequence], tracker: TrackerConfig | None = None,
            mode: str = "fused", jobs: int = 1) -> OpeResult:
    """Track every sequence once from its first-frame box and score against visible gt."""
    tracker = tracker or TrackerConfig()
    usable = []
    for seq in sequences:
        if seq.gt_visible is None or len(seq.gt_visible) != len(seq):
            log.warning("sequence %s: missing ground truth, skipped", seq.name)
            continue
        usable.append(seq)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            seqs = list(pool.map(lambda s: _track_one(model, s, tracker, mode), usable))
    else:
        seqs = [_track_one(model, s, tracker, mode) for s in usable]
    frames = sum(len(s.boxes) - 1 for s in seqs)
    seconds = sum(s.seconds for s in seqs)
    fps = frames / seconds if seconds > 0 else float("nan")
    return OpeResult(seqs, pool_metrics(seqs), attribute_report(seqs), fps)


def fps_bench(model: SiamIVFN, frame_size: tuple[int, int] = (160, 128), iterations: int = 20,
              repetitions: int = 3, tracker: TrackerConfig | None = None, seed: int = 0
              ) -> tuple[float, float]:
    """Throughput of init-once + ``iterations`` updates on random frames; (mean, sd) FPS."""
    if iterations < 10:
        raise ValueError(f"fps_bench needs at least 10 iterations, got {iterations}")
    from .tracker import SiamTracker

    w, h = frame_size
    rng = np.random.default_rng(seed)
    frames = [(rng.random((3, h, w), dtype=np.float32), rng.random((1, h, w), dtype=np.float32))
              for _ in range(4)]
    box = (w / 2 - 12, h / 2 - 12, 24, 24)
    rates = []
    for _ in range(repetitions):
        trk = SiamTracker(model, tracker)
        trk.init(frames[0], box)
        t0 = time.perf_counter()
        for i in range(iterations):
            trk.update(frames[i % len(frames)], i + 1)
        rates.append(iterations / (time.perf_counter() - t0))
    return float(np.mean(rates)), float(np.std(rates))


# --------------------------------------------------------------------------- reports


def _num(v: float) -> str:
    return f"{v:.6f}"


def metrics_rows(ope: OpeResult, include_fps: bool = True) -> list[tuple[str, str, str]]:
    rows = [("precision", str(t), _num(v)) for t, v in ope.pr.items()]
    rows.append(("success_auc", "", _num(ope.auc)))
    for tag, m in ope.attributes.items():
        rows.append(("attr_pr", tag, _num(m.pr[20])))
        rows.append(("attr_sr", tag, _num(m.auc)))
    if include_fps:
        rows.append(("fps", "", f"{ope.fps:.1f}"))
    return rows


def write_metrics(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"{m},{k},{v}\n" for m, k, v in rows))


def write_curve(path, thresholds, values) -> None:
    with open(path, "w") as fh:
        fh.write("".join(f"{t:g},{v:.6f}\n" for t, v in zip(thresholds, values)))


def curves_svg(precision: np.ndarray, success: np.ndarray, title: str = "") -> str:
    """Two side-by-side line plots as a standalone SVG document."""
    W, H, pad = 320, 240, 40

    def panel(x0, xs, ys, xmax, xlabel, name):
        pw, ph = W - 2 * pad, H - 2 * pad
        pts = " ".join(f"{x0 + pad + pw * x / xmax:.2f},{pad + ph * (1 - y):.2f}"
                       for x, y in zip(xs, ys))
        ticks = "".join(
            f'<text x="{x0 + pad - 6}" y="{pad + ph * (1 - t) + 4:.1f}" text-anchor="end" '
            f'font-size="10">{t:.1f}</text>' for t in (0.0, 0.5, 1.0))
        return (f'<rect x="{x0 + pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" '
                f'stroke="black"/>{ticks}'
                f'<text x="{x0 + pad}" y="{pad + ph + 14}" font-size="10">0</text>'
                f'<text x="{x0 + pad + pw}" y="{pad + ph + 14}" text-anchor="end" '
                f'font-size="10">{xmax:g}</text>'
                f'<text x="{x0 + W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">'
                f'{xlabel}</text>'
                f'<text x="{x0 + W / 2}" y="{pad - 10}" text-anchor="middle" font-size="12">'
                f'{name}</text>'
                f'<polyline fill="none" stroke="#1f5fbf" stroke-width="1.5" points="{pts}"/>')

    body = (panel(0, PR_THRESHOLDS, precision, 50, "location error threshold (px)", "Precision")
            + panel(W, SR_THRESHOLDS, success, 1, "overlap threshold", "Success"))
    head = f"<title>{title}</title>" if title else ""
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * W}" height="{H}" '
            f'viewBox="0 0 {2 * W} {H}" font-family="sans-serif">{head}'
            f'<rect width="100%" height="100%" fill="white"/>{body}</svg>\n')
