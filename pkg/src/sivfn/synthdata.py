"""Deterministic synthetic RGB-T sequences.

The visible image is a textured, coloured object over a cluttered background,
scaled by the illumination factor.  The thermal image is a flat warm
silhouette over a cool background in which a ``thermal_clutter`` fraction of
the clutter blobs are warm as well; distractor objects are nearly as warm as
the target, so in thermal they differ from it only by shape and motion.  The
thermal image is translated by the misalignment offset.  Both images get
additive Gaussian noise.

All randomness comes from SplitMix64 (see :class:`SplitMix64`), so a scene is
a pure function of its :class:`SceneSpec`.  Each (frame, modality) noise field
uses its own derived stream; the thermal stream never depends on visible-only
settings such as illumination.

On-disk layout of one sequence directory::

    visible/000000.ppm ...     binary P6, 8-bit
    thermal/000000.pgm ...     binary P5, 8-bit
    groundtruth_visible.txt    one ``x,y,w,h`` line per frame
    groundtruth_thermal.txt    visible boxes shifted by the misalignment
    attributes.txt             one line of comma-separated tags
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TAGS = ("NO", "PO", "HO", "LI", "LR", "TC", "DEF", "FM", "SV", "MB", "CM", "BC")
LABEL_ONLY_TAGS = ("TC", "DEF", "SV", "MB", "CM")


class DataError(ValueError):
    """Malformed or inconsistent sequence data."""


# --------------------------------------------------------------------------- rng

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """``state += 0x9E3779B97F4A7C15; return mix(state)`` with the standard finaliser.

    Uniforms are ``(u64 >> 11) * 2**-53``.  Normals use one Box-Muller draw per
    pair of uniforms: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * (self.next_u64() >> 11) * 2.0 ** -53

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]``."""
        return lo + int(self.uniform() * (hi - lo + 1)) if hi > lo else lo

    def normal(self) -> float:
        u1, u2 = self.uniform(), self.uniform()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


def stream_key(seed: int, *labels: int) -> int:
    """Derive an independent stream seed: fold each label in with one SplitMix64 step."""
    key = seed & MASK64
    for label in labels:
        key = SplitMix64(key ^ (label & MASK64)).next_u64()
    return key


def uniform_field(key: int, n: int) -> np.ndarray:
    """The first ``n`` uniforms of ``SplitMix64(key)``, vectorised."""
    i = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(key) + i * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def normal_field(key: int, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    u = uniform_field(key, 2 * n)
    u1, u2 = u[0::2], u[1::2]
    return (np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)


# --------------------------------------------------------------------------- scene


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 60
    width: int = 160
    height: int = 128
    seed: int = 0
    shape: str = "rectangle"
    size: tuple[int, int] = (24, 24)
    start: tuple[int, int] | None = None          # top-left at frame 0; None -> seeded
    velocity: tuple[float, float] = (1.5, 1.0)    # px/frame, reflected at the frame border
    color: tuple[float, float, float] | None = None
    texture: float = 0.25
    thermal_intensity: float = 0.75
    clutter: float = 0.3
    thermal_clutter: float = 0.0                  # fraction of clutter blobs that are warm
    background: tuple[float, float, float] | None = None
    background_temperature: float = 0.35
    illumination: float = 1.0
    occlusion: float = 0.0
    noise: float = 0.02
    misalign: tuple[int, int] = (0, 0)
    distractors: int = 0
    extra_tags: tuple[str, ...] = ()

    def tags(self) -> list[str]:
        """Attribute tags from the degradation settings, in canonical order.

        LI: illumination < 0.5.  NO: occlusion < 0.1; PO: 0.1 <= occlusion <= 0.5;
        HO: occlusion > 0.5.  FM: speed > 10 px/frame.  LR: smaller side < 12 px.
        BC: clutter > 0.5.  TC/DEF/SV/MB/CM only via ``extra_tags``.
        """
        tags = set(self.extra_tags)
        if self.occlusion < 0.1:
            tags.add("NO")
        elif self.occlusion <= 0.5:
            tags.add("PO")
        else:
            tags.add("HO")
        if self.illumination < 0.5:
            tags.add("LI")
        if math.hypot(*self.velocity) > 10:
            tags.add("FM")
        if min(self.size) < 12:
            tags.add("LR")
        if self.clutter > 0.5:
            tags.add("BC")
        unknown = tags - set(TAGS)
        if unknown:
            raise ValueError(f"unknown attribute tags {sorted(unknown)}")
        return [t for t in TAGS if t in tags]

    def validate(self) -> None:
        w, h = self.size
        if self.frames < 1 or self.width < 8 or self.height < 8:
            raise ValueError("scene needs at least one frame and an 8x8 canvas")
        if w < 2 or h < 2 or w > self.width - 4 or h > self.height - 4:
            raise ValueError(f"object size {self.size} does not fit a {self.width}x{self.height} frame")
        if not 0 < self.illumination <= 1:
            raise ValueError(f"illumination must be in (0, 1], got {self.illumination}")
        if not 0 <= self.thermal_clutter <= 1:
            raise ValueError(f"thermal_clutter must be in [0, 1], got {self.thermal_clutter}")
        if not 0 <= self.occlusion < 1:
            raise ValueError(f"occlusion must be in [0, 1), got {self.occlusion}")
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if any(int(v) != v for v in self.misalign):
            raise ValueError("misalignment must be whole pixels")
        self.tags()


@dataclass
class _Mover:
    size: tuple[int, int]
    start: tuple[float, float]
    velocity: tuple[float, float]
    color: np.ndarray
    texture: float
    period: int
    heat: float
    shape: str

    def position(self, t: int, width: int, height: int) -> tuple[int, int]:
        w, h = self.size
        # Reflect inside [1, W - w - 1] so the object keeps a 1 px margin.
        return (_reflect(self.start[0] + self.velocity[0] * t, 1, width - w - 1),
                _reflect(self.start[1] + self.velocity[1] * t, 1, height - h - 1))


def _reflect(p: float, lo: int, hi: int) -> int:
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + int(round(span - abs(span - q)))


def _mask(shape: str, w: int, h: int) -> np.ndarray:
    if shape == "rectangle":
        return np.ones((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    # pixel centres inside the inscribed ellipse; extreme rows/cols always hit
    return ((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2 <= 1.0 + 1e-9


def _pattern(w: int, h: int, color: np.ndarray, amp: float, period: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    checker = np.where(((xx // period) + (yy // period)) % 2 == 0, 1.0, -1.0)
    return np.clip(color[:, None, None] + amp * checker[None], 0.0, 1.0)


@dataclass
class _Scene:
    spec: SceneSpec
    background: np.ndarray     # (3, H, W)
    heat: np.ndarray           # (1, H, W) thermal background
    target: _Mover
    distractors: list[_Mover]
    occluder_color: np.ndarray


@functools.lru_cache(maxsize=64)
def build_scene(spec: SceneSpec) -> _Scene:
    spec.validate()
    rng = SplitMix64(stream_key(spec.seed, 1))
    W, H = spec.width, spec.height
    bg_color = (np.array(spec.background, dtype=np.float64) if spec.background is not None
                else np.array([rng.uniform(0.25, 0.6) for _ in range(3)]))
    background = np.broadcast_to(bg_color[:, None, None], (3, H, W)).copy()
    heat = np.full((1, H, W), spec.background_temperature)
    # separate stream so the visible scene does not depend on thermal_clutter
    heat_rng = SplitMix64(stream_key(spec.seed, 5))
    contrast = spec.thermal_intensity - spec.background_temperature
    n_blobs = int(round(spec.clutter * W * H / 300.0))
    for _ in range(n_blobs):
        bw, bh = rng.randint(4, 20), rng.randint(4, 20)
        bx, by = rng.randint(0, W - bw), rng.randint(0, H - bh)
        col = np.array([rng.uniform(0.05, 0.95) for _ in range(3)])
        m = _mask("ellipse" if rng.uniform() < 0.5 else "rectangle", bw, bh)
        background[:, by:by + bh, bx:bx + bw][:, m] = col[:, None]
        warm, level = heat_rng.uniform() < spec.thermal_clutter, heat_rng.uniform(0.3, 0.9)
        if warm:
            heat[:, by:by + bh, bx:bx + bw][:, m] = spec.background_temperature + level * contrast
    w, h = spec.size
    start = spec.start if spec.start is not None else (
        rng.uniform(1, W - w - 1), rng.uniform(1, H - h - 1))
    color = (np.array(spec.color, dtype=np.float64) if spec.color is not None
             else np.array([rng.uniform(0.1, 0.9) for _ in range(3)]))
    target = _Mover((w, h), tuple(float(v) for v in start), spec.velocity, color, spec.texture,
                    rng.randint(3, 6), spec.thermal_intensity, spec.shape)
    distractors = []
    for _ in range(spec.distractors):
        dw = max(4, int(w * rng.uniform(0.8, 1.2)))
        dh = max(4, int(h * rng.uniform(0.8, 1.2)))
        dw, dh = min(dw, W - 4), min(dh, H - 4)
        speed = math.hypot(*spec.velocity) or 1.0
        ang = rng.uniform(0, 2 * math.pi)
        distractors.append(_Mover(
            (dw, dh), (rng.uniform(1, W - dw - 1), rng.uniform(1, H - dh - 1)),
            (speed * math.cos(ang), speed * math.sin(ang)),
            np.array([rng.uniform(0.1, 0.9) for _ in range(3)]), rng.uniform(0.1, 0.3),
            rng.randint(2, 7), spec.thermal_intensity * rng.uniform(0.9, 1.0),
            "ellipse" if rng.uniform() < 0.5 else "rectangle"))
    occ = np.array([rng.uniform(0.2, 0.8) for _ in range(3)])
    return _Scene(spec, background, heat, target, distractors, occ)


def _occluder_box(spec: SceneSpec, t: int, x: int, y: int) -> tuple[int, int, int, int] | None:
    """Vertical bar over the middle of the target during the middle third of the sequence."""
    if spec.occlusion <= 0 or not (spec.frames // 3 <= t < 2 * spec.frames // 3):
        return None
    w, h = spec.size
    ow = max(1, int(round(spec.occlusion * w)))
    return x + (w - ow) // 2, y - 2, ow, h + 4


def _paint(canvas: np.ndarray, x: int, y: int, mask: np.ndarray, values: np.ndarray) -> None:
    """Paint ``values`` (C, h, w) through ``mask`` at (x, y), clipped to the canvas."""
    _, H, W = canvas.shape
    h, w = mask.shape
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, W), min(y + h, H)
    if x1 <= x0 or y1 <= y0:
        return
    m = mask[y0 - y:y1 - y, x0 - x:x1 - x]
    region = canvas[:, y0:y1, x0:x1]
    region[:, m] = values[:, y0 - y:y1 - y, x0 - x:x1 - x][:, m]


def _shifted(img: np.ndarray, dx: int, dy: int, fill: float) -> np.ndarray:
    """``img`` translated by (dx, dy); uncovered pixels get ``fill``."""
    out = np.full_like(img, fill)
    _, H, W = img.shape
    if abs(dx) < W and abs(dy) < H:
        out[:, max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
            img[:, max(-dy, 0):H + min(-dy, 0), max(-dx, 0):W + min(-dx, 0)]
    return out


def render_frame_pair(spec: SceneSpec, t: int, quantize: bool = True):
    """Render frame ``t``.  Returns ``(visible (3,H,W), thermal (1,H,W), gt_visible, gt_thermal)``.

    With ``quantize`` the images are uint8, otherwise float in [0, 1] before noise
    clipping and rounding.
    """
    if not 0 <= t < spec.frames:
        raise IndexError(f"frame {t} outside 0..{spec.frames - 1}")
    scene = build_scene(spec)
    W, H = spec.width, spec.height
    dx, dy = int(spec.misalign[0]), int(spec.misalign[1])
    vis = scene.background.copy()
    th = _shifted(scene.heat, dx, dy, spec.background_temperature)

    for mover in scene.distractors + [scene.target]:
        x, y = mover.position(t, W, H)
        mw, mh = mover.size
        m = _mask(mover.shape, mw, mh)
        _paint(vis, x, y, m, _pattern(mw, mh, mover.color, mover.texture, mover.period))
        _paint(th, x + dx, y + dy, m, np.full((1, mh, mw), mover.heat))

    tx, ty = scene.target.position(t, W, H)
    occ = _occluder_box(spec, t, tx, ty)
    if occ is not None:
        ox, oy, ow, oh = occ
        m = np.ones((oh, ow), dtype=bool)
        _paint(vis, ox, oy, m, np.broadcast_to(scene.occluder_color[:, None, None], (3, oh, ow)))
        _paint(th, ox + dx, oy + dy, m,
               np.full((1, oh, ow), max(0.0, spec.background_temperature - 0.05)))

    vis = vis * spec.illumination
    if spec.noise > 0:
        vis = vis + spec.noise * normal_field(stream_key(spec.seed, 2, t, 0), vis.shape)
        th = th + spec.noise * normal_field(stream_key(spec.seed, 2, t, 1), th.shape)
    w, h = spec.size
    gt_v = (tx, ty, w, h)
    gt_t = (tx + dx, ty + dy, w, h)
    if quantize:
        vis, th = to_uint8(vis), to_uint8(th)
    return vis, th, gt_v, gt_t


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- netpbm


def write_netpbm(path, img: np.ndarray) -> None:
    """Binary P6 for (3, H, W) or P5 for (1, H, W) / (H, W) uint8 images."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("netpbm writer expects uint8 data")
    if img.ndim == 3 and img.shape[0] == 3:
        magic, body = b"P6", np.ascontiguousarray(img.transpose(1, 2, 0))
    elif img.ndim == 2 or (img.ndim == 3 and img.shape[0] == 1):
        magic, body = b"P5", np.ascontiguousarray(img.reshape(img.shape[-2:]))
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = body.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body.tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_netpbm(path) -> np.ndarray:
    """Read binary P5/P6 8-bit; returns (C, H, W) uint8."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: malformed netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: malformed netpbm header (magic {magic!r}, expected P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed netpbm header (non-numeric size)") from None
    if maxval != 255 or w < 1 or h < 1:
        raise DataError(f"{path}: malformed netpbm header (need 8-bit, got {w}x{h} max {maxval})")
    pos += 1  # single whitespace byte before the raster
    c = 3 if magic == b"P6" else 1
    body = raw[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise DataError(f"{path}: truncated raster ({len(body)} of {w * h * c} bytes)")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# --------------------------------------------------------------------------- sequences


@dataclass
class Sequence:
    name: str
    visible: np.ndarray        # (T, 3, H, W) uint8
    thermal: np.ndarray        # (T, 1, H, W) uint8
    gt_visible: np.ndarray     # (T, 4)
    gt_thermal: np.ndarray     # (T, 4)
    tags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.visible.shape[0]

    def frame_pair(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Float32 frames scaled to [0, 1]."""
        return (self.visible[t].astype(np.float32) / 255.0,
                self.thermal[t].astype(np.float32) / 255.0)

    def init_box(self) -> np.ndarray:
        return self.gt_visible[0]

    @property
    def misalignment(self) -> tuple[float, float]:
        d = self.gt_thermal[0] - self.gt_visible[0]
        return float(d[0]), float(d[1])


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _write_boxes(path: Path, boxes) -> None:
    path.write_text("".join(",".join(_fmt(v) for v in b) + "\n" for b in boxes))


def render_sequence(spec: SceneSpec, name: str = "synthetic") -> Sequence:
    frames = [render_frame_pair(spec, t) for t in range(spec.frames)]
    return Sequence(name,
                    np.stack([f[0] for f in frames]), np.stack([f[1] for f in frames]),
                    np.array([f[2] for f in frames], dtype=np.float64),
                    np.array([f[3] for f in frames], dtype=np.float64), spec.tags())


def generate_sequence(spec: SceneSpec, out_dir) -> Path:
    out = Path(out_dir)
    try:
        (out / "visible").mkdir(parents=True, exist_ok=True)
        (out / "thermal").mkdir(parents=True, exist_ok=True)
        gv, gtt = [], []
        for t in range(spec.frames):
            vis, th, gt_v, gt_t = render_frame_pair(spec, t)
            write_netpbm(out / "visible" / f"{t:06d}.ppm", vis)
            write_netpbm(out / "thermal" / f"{t:06d}.pgm", th)
            gv.append(gt_v)
            gtt.append(gt_t)
        _write_boxes(out / "groundtruth_visible.txt", gv)
        _write_boxes(out / "groundtruth_thermal.txt", gtt)
        (out / "attributes.txt").write_text(",".join(spec.tags()) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write sequence to {out}: {exc}") from exc
    return out


def _read_boxes(path: Path) -> np.ndarray:
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = re.split(r"[,\s]+", line.strip())
        if len(parts) != 4:
            raise DataError(f"{path}:{n}: expected x,y,w,h")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DataError(f"{path}:{n}: non-numeric box {line!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    vis_files = sorted((d / "visible").glob("*.ppm"))
    th_files = sorted((d / "thermal").glob("*.pgm"))
    if not vis_files:
        raise DataError(f"{d}: no visible frames")
    if len(vis_files) != len(th_files):
        raise DataError(f"{d}: frame count mismatch: {len(vis_files)} visible vs"
                        f" {len(th_files)} thermal")
    gt_v = _read_boxes(d / "groundtruth_visible.txt")
    gt_t = _read_boxes(d / "groundtruth_thermal.txt")
    for label, gt in (("groundtruth_visible.txt", gt_v), ("groundtruth_thermal.txt", gt_t)):
        if len(gt) != len(vis_files):
            raise DataError(f"{d}: {label} has {len(gt)} lines for {len(vis_files)} frames")
    offset = gt_t - gt_v
    if not np.allclose(offset[:, :2], offset[0, :2]) or not np.allclose(offset[:, 2:], 0):
        raise DataError(f"{d}: thermal ground truth is not a constant shift of the visible one")
    tags_path = d / "attributes.txt"
    tags = [t.strip() for t in tags_path.read_text().strip().split(",") if t.strip()] \
        if tags_path.exists() else []
    unknown = [t for t in tags if t not in TAGS]
    if unknown:
        raise DataError(f"{tags_path}: unknown attribute tag(s) {unknown}")
    vis = np.stack([read_netpbm(f) for f in vis_files])
    th = np.stack([read_netpbm(f) for f in th_files])
    if vis.shape[1] != 3 or th.shape[1] != 1:
        raise DataError(f"{d}: expected 3-channel visible and 1-channel thermal frames")
    if vis.shape[2:] != th.shape[2:]:
        raise DataError(f"{d}: visible {vis.shape[2:]} and thermal {th.shape[2:]} sizes differ")
    return Sequence(d.name, vis, th, gt_v, gt_t, [t for t in TAGS if t in tags])


def list_sequences(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.is_dir() and (p / "visible").is_dir())


def load_dataset(directory) -> list[Sequence]:
    paths = list_sequences(directory)
    if not paths:
        raise DataError(f"{directory}: no sequence directories found")
    return [load_sequence(p) for p in paths]


# --------------------------------------------------------------------------- datasets

_ATTR_SETTINGS = {
    "LI": {"illumination": 0.25},
    "PO": {"occlusion": 0.3},
    "HO": {"occlusion": 0.6},
    "BC": {"clutter": 0.8},
    "FM": {"velocity": (9.0, 7.0)},
    "LR": {"size": (10, 10)},
}


def random_scene(seed: int, index: int, frames: int = 60, attrs=(), **overrides) -> SceneSpec:
    """A seeded scene for dataset generation; ``attrs`` switch on degradations by tag."""
    rng = SplitMix64(stream_key(seed, 3, index))
    w, h = rng.randint(18, 30), rng.randint(18, 30)
    speed = rng.uniform(0.5, 2.5)
    ang = rng.uniform(0, 2 * math.pi)
    params = dict(
        frames=frames, seed=stream_key(seed, 4, index),
        shape="ellipse" if rng.uniform() < 0.4 else "rectangle",
        size=(w, h), velocity=(round(speed * math.cos(ang), 3), round(speed * math.sin(ang), 3)),
        texture=rng.uniform(0.12, 0.3), thermal_intensity=rng.uniform(0.65, 0.85),
        clutter=rng.uniform(0.15, 0.45), background_temperature=rng.uniform(0.3, 0.45),
    )
    params.update(thermal_clutter=rng.uniform(0.2, 0.5), distractors=rng.randint(0, 2))
    extra = []
    for tag in attrs:
        if tag not in TAGS:
            raise ValueError(f"unknown attribute tag {tag!r}")
        params.update(_ATTR_SETTINGS.get(tag, {}))
        if tag in LABEL_ONLY_TAGS:
            extra.append(tag)
    params["extra_tags"] = tuple(extra)
    params.update({k: v for k, v in overrides.items() if v is not None})
    return SceneSpec(**params)


def generate_dataset(out_dir, count: int, frames: int = 60, seed: int = 0, attrs=(),
                     start_index: int = 0, **overrides) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for i in range(start_index, start_index + count):
        spec = random_scene(seed, i, frames, attrs, **overrides)
        paths.append(generate_sequence(spec, out / f"seq_{i:04d}"))
    return paths


def split_by_index(items: list, folds: int, fold: int) -> tuple[list, list]:
    """Generic k-fold split: item ``i`` is held out when ``i % folds == fold``."""
    if folds < 2 or not 0 <= fold < folds:
        raise ValueError(f"need folds >= 2 and 0 <= fold < folds, got {folds}, {fold}")
    train = [x for i, x in enumerate(items) if i % folds != fold]
    test = [x for i, x in enumerate(items) if i % folds == fold]
    return train, test
