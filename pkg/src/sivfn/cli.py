"""``sivfn`` command line: data generation, training, tracking, evaluation, benchmarks.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
The run log goes to standard error; data outputs only to files.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import logging
import math
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .cffn import PRESETS, BackboneConfig
from .model import MODES, ModelConfig, SiamIVFN
from .synthdata import TAGS, DataError, generate_dataset, load_dataset, load_sequence
from .tracker import TrackerConfig, track_sequence, write_contributions, write_results
from .traineval import (PR_THRESHOLDS, REFERENCE_FPS, SR_THRESHOLDS, NumericError, TrainConfig,
                        curves_svg, finetune_staged, fps_bench, metrics_rows, pretrain, run_ope,
                        write_curve, write_metrics)

log = logging.getLogger("sivfn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


# --------------------------------------------------------------------------- config

DEFAULTS: dict[str, object] = {
    "backbone.preset": "tiny",
    "backbone.coupling_rates": (0.0, 0.25, 0.5, 0.75),
    "backbone.kernels": (7, 5, 3, 3),
    "backbone.strides": (2, 1, 1, 1),
    "backbone.seed": 0,
    "can.enabled": True,
    "can.reduction": 4,
    "head.width": 16,
    "head.tower_layers": 2,
    "tracker.template_size": 127,
    "tracker.search_size": 255,
    "tracker.context": 0.5,
    "tracker.window_weight": 0.3,
    "tracker.smoothing": 0.3,
    "tracker.min_score": 0.0,
    "train.pretrain_optimizer": "sgd_momentum",
    "train.pretrain_epochs": 8,
    "train.pretrain_lr_start": 0.08,
    "train.pretrain_lr_end": 1e-6,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.epochs": 40,
    "train.lr_start": 8e-5,
    "train.lr_end": 1e-6,
    "train.stage_boundaries": (10, 20, 30),
    "train.steps_per_epoch": 25,
    "train.batch_size": 8,
    "train.max_gap": 1000,
    "train.pos_neg_ratio": 0.5,
    "train.center_jitter": 0.25,
    "train.scale_jitter": 0.3,
    "train.grad_clip": 1.0,
    "train.seed": 0,
    "data.gt_modality": "visible",
}


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(f"non-finite number {raw!r}")
        return v
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if not items:
            raise ValueError("empty list")
        kind = int if all(isinstance(d, int) for d in default) else float
        return tuple(kind(s) for s in items)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Overlay ``key = value`` lines onto :data:`DEFAULTS`."""
    cfg = dict(DEFAULTS)
    seen: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = n
        try:
            cfg[key] = _parse_value(raw, DEFAULTS[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: cannot parse value for {key!r}: {exc}") from None
    if cfg["backbone.preset"] not in PRESETS:
        raise ConfigError(f"{source}: unknown backbone.preset {cfg['backbone.preset']!r}")
    if cfg["data.gt_modality"] not in ("visible", "thermal"):
        raise ConfigError(f"{source}: data.gt_modality must be visible or thermal")
    return cfg


def parse_config(path) -> dict[str, object]:
    if path is None:
        return dict(DEFAULTS)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, str(path))


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def format_config(cfg: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt_value(cfg[k])}\n" for k in DEFAULTS)


def model_config(cfg) -> ModelConfig:
    try:
        backbone = BackboneConfig.preset(cfg["backbone.preset"],
                                         kernels=tuple(cfg["backbone.kernels"]),
                                         strides=tuple(cfg["backbone.strides"]),
                                         coupling_rates=tuple(cfg["backbone.coupling_rates"]),
                                         seed=cfg["backbone.seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ModelConfig(backbone, can_reduction=cfg["can.reduction"],
                       can_enabled=cfg["can.enabled"], head_width=cfg["head.width"],
                       tower_layers=cfg["head.tower_layers"], seed=cfg["backbone.seed"])


def tracker_config(cfg) -> TrackerConfig:
    return TrackerConfig(template_size=cfg["tracker.template_size"],
                         search_size=cfg["tracker.search_size"], context=cfg["tracker.context"],
                         window_weight=cfg["tracker.window_weight"],
                         smoothing=cfg["tracker.smoothing"], min_score=cfg["tracker.min_score"])


def _common_train(cfg) -> dict:
    return dict(steps_per_epoch=cfg["train.steps_per_epoch"], batch_size=cfg["train.batch_size"],
                stage_boundaries=tuple(cfg["train.stage_boundaries"]),
                max_gap=cfg["train.max_gap"], pos_neg_ratio=cfg["train.pos_neg_ratio"],
                center_jitter=cfg["train.center_jitter"], scale_jitter=cfg["train.scale_jitter"],
                grad_clip=cfg["train.grad_clip"], seed=cfg["train.seed"])


def pretrain_config(cfg) -> TrainConfig:
    tc = TrainConfig(phase="pretrain", optimizer=cfg["train.pretrain_optimizer"],
                     epochs=cfg["train.pretrain_epochs"],
                     momentum=cfg["train.momentum"], weight_decay=cfg["train.weight_decay"],
                     lr_start=cfg["train.pretrain_lr_start"], lr_end=cfg["train.pretrain_lr_end"],
                     **_common_train(cfg))
    _validate(tc)
    return tc


def finetune_config(cfg) -> TrainConfig:
    tc = TrainConfig.finetune(epochs=cfg["train.epochs"], lr_start=cfg["train.lr_start"],
                              lr_end=cfg["train.lr_end"], **_common_train(cfg))
    _validate(tc)
    return tc


def _validate(tc: TrainConfig) -> None:
    try:
        tc.validate()
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from None


# --------------------------------------------------------------------------- checkpoints

MAGIC = b"SIVF"
VERSION = 1
CONFIG_ENTRY = "meta.config"


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """``SIVF``, u32 version, u32 count, entries, 8-byte BLAKE2b checksum (all little-endian).

    Entry: u32 name length, UTF-8 name, u32 rank, u32 dims, float32 values row-major.
    """
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + checksum(body)


def decode_checkpoint(blob: bytes, source: str = "<checkpoint>") -> dict[str, np.ndarray]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    body, tail = blob[:-8], blob[-8:]
    if checksum(body) != tail:
        raise DataError(f"{source}: checksum mismatch (file corrupted)")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(body):
                raise DataError(f"{source}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size,
                                          offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise DataError(f"{source}: malformed checkpoint ({exc})") from None
    if pos != len(body):
        raise DataError(f"{source}: {len(body) - pos} trailing bytes before the checksum")
    return tensors


def save_checkpoint(path, model: SiamIVFN, cfg: dict[str, object]) -> None:
    text = format_config(cfg).encode("utf-8")
    tensors = {CONFIG_ENTRY: np.frombuffer(text, dtype=np.uint8).astype(np.float32)}
    tensors.update(model.store.state())
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> tuple[SiamIVFN, dict[str, object]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    tensors = decode_checkpoint(blob, str(path))
    if CONFIG_ENTRY not in tensors:
        raise DataError(f"{path}: checkpoint lacks the embedded config")
    text = tensors.pop(CONFIG_ENTRY).astype(np.uint8).tobytes().decode("utf-8")
    cfg = parse_config_text(text, f"{path}:{CONFIG_ENTRY}")
    model = SiamIVFN(model_config(cfg))
    expected = set(model.store.names())
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise DataError(f"{path}: parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in tensors.items():
        if arr.shape != model.store[name].shape:
            raise DataError(f"{path}: {name} has shape {arr.shape}, model expects"
                            f" {model.store[name].shape}")
    model.store.load_state(tensors)
    return model, cfg


# --------------------------------------------------------------------------- commands

GRID_PERMUTATIONS = tuple(itertools.permutations((0.25, 0.5, 0.75)))


def _parse_pair(text: str, flag: str) -> tuple[int, int]:
    try:
        dx, dy = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected DX,DY integers, got {text!r}") from None
    return dx, dy


def cmd_gen_data(args) -> int:
    attrs = [a.strip() for a in args.attr.split(",") if a.strip()] if args.attr else []
    unknown = [a for a in attrs if a not in TAGS]
    if unknown:
        raise UsageError(f"--attr: unknown tag(s) {unknown}; choose from {','.join(TAGS)}")
    overrides = {"illumination": args.illum, "occlusion": args.occlusion,
                 "misalign": _parse_pair(args.misalign, "--misalign") if args.misalign else None}
    try:
        paths = generate_dataset(args.out, args.seqs, args.frames, args.seed, attrs,
                                 args.start_index, **overrides)
    except ValueError as exc:
        raise UsageError(f"gen-data: {exc}") from None
    log.info("wrote %d sequences to %s", len(paths), args.out)
    return EXIT_OK


def _log_config(cfg) -> None:
    for line in format_config(cfg).splitlines():
        log.info("config: %s", line)


def cmd_pretrain(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    data = load_dataset(args.data)
    model = SiamIVFN(model_config(cfg))
    pretrain(model, data, pretrain_config(cfg), tracker_config(cfg))
    save_checkpoint(args.out, model, cfg)
    log.info("saved %s", args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    model, init_cfg = load_checkpoint(args.init)
    if model_config(init_cfg) != model_config(cfg):
        raise ConfigError(f"--init {args.init}: architecture differs from --config {args.config}")
    data = load_dataset(args.data)
    finetune_staged(model, data, finetune_config(cfg), tracker_config(cfg))
    save_checkpoint(args.out, model, cfg)
    log.info("saved %s", args.out)
    return EXIT_OK


def cmd_track(args) -> int:
    model, cfg = load_checkpoint(args.model)
    seq = load_sequence(args.seq)
    contrib = [] if args.contrib else None
    results = track_sequence(model, seq, tracker_config(cfg), args.mode, contrib)
    write_results(args.out, results)
    if args.contrib:
        write_contributions(args.contrib, contrib)
    log.info("tracked %d frames of %s -> %s", len(results), seq.name, args.out)
    return EXIT_OK


def evaluate(model, cfg, data, out_dir: Path, mode: str, plot: bool, jobs: int,
             include_fps: bool) -> None:
    seqs = load_dataset(data)
    if cfg["data.gt_modality"] == "thermal":
        for s in seqs:
            s.gt_visible = s.gt_thermal
    ope = run_ope(model, seqs, tracker_config(cfg), mode, jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results").mkdir(exist_ok=True)
    for s in ope.sequences:
        lines = [f"{i},{b[0]:.3f},{b[1]:.3f},{b[2]:.3f},{b[3]:.3f}" for i, b in enumerate(s.boxes)]
        (out_dir / "results" / f"{s.name}.txt").write_text("\n".join(lines) + "\n")
    write_metrics(out_dir / "metrics.csv", metrics_rows(ope, include_fps))
    write_curve(out_dir / "precision_curve.csv", PR_THRESHOLDS, ope.overall.precision)
    write_curve(out_dir / "success_curve.csv", SR_THRESHOLDS, ope.overall.success)
    if plot:
        (out_dir / "curves.svg").write_text(
            curves_svg(ope.overall.precision, ope.overall.success, f"OPE ({mode})"))
    log.info("mode %s: PR@20 %.3f, SR AUC %.3f over %d sequences", mode, ope.pr[20], ope.auc,
             len(ope.sequences))


def cmd_eval(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    model, cfg = load_checkpoint(args.model)
    evaluate(model, cfg, args.data, Path(args.out_dir), args.mode, args.plot, args.jobs,
             not args.no_fps)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iters < 10:
        raise UsageError("--iters must be >= 10")
    model, cfg = load_checkpoint(args.model)
    mean, sd = fps_bench(model, (args.width, args.height), args.iters, args.reps,
                         tracker_config(cfg))
    log.info("fps %.1f +- %.1f over %d repetitions (reference: %.1f FPS)",
             mean, sd, args.reps, REFERENCE_FPS)
    if args.out:
        write_metrics(args.out, [("fps_mean", "", f"{mean:.1f}"), ("fps_sd", "", f"{sd:.1f}"),
                                 ("fps_reference", "", f"{REFERENCE_FPS:.1f}")])
    return EXIT_OK


def read_rates_file(path, layers: int) -> list[tuple[float, ...]]:
    """One rate vector per non-comment line; a vector one short gets a leading 0 for layer 1."""
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"--rates-file {path}: cannot read ({exc.strerror})") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rates = tuple(float(v) for v in line.replace(",", " ").split())
        except ValueError:
            raise UsageError(f"{path}:{n}: cannot parse rates {line!r}") from None
        if len(rates) == layers - 1:
            rates = (0.0,) + rates
        if len(rates) != layers or not all(0 <= r <= 1 for r in rates):
            raise UsageError(f"{path}:{n}: need {layers - 1} or {layers} rates in [0, 1]")
        rows.append(rates)
    if not rows:
        raise UsageError(f"{path}: no rate vectors")
    return rows


def cmd_grid_coupling(args) -> int:
    cfg = parse_config(args.config)
    _log_config(cfg)
    layers = len(cfg["backbone.kernels"])
    if args.rates_file:
        grid = read_rates_file(args.rates_file, layers)
    else:
        grid = [(0.0,) + p for p in GRID_PERMUTATIONS]
    train_data = load_dataset(args.data)
    eval_data = args.eval_data or args.data
    if not args.eval_data:
        log.warning("no --eval-data given; scoring on the training sequences")
    out_dir = Path(args.out_dir)
    rows = []
    for i, rates in enumerate(grid, start=1):
        run_cfg = dict(cfg, **{"backbone.coupling_rates": rates})
        model = SiamIVFN(model_config(run_cfg))
        pretrain(model, train_data, pretrain_config(run_cfg), tracker_config(run_cfg))
        finetune_staged(model, train_data, finetune_config(run_cfg), tracker_config(run_cfg))
        ope = run_ope(model, load_dataset(eval_data), tracker_config(run_cfg))
        key = " ".join(f"{r:g}" for r in rates)
        rows.append((i, key, ope.pr[20], ope.auc))
        log.info("grid %d rates %s: PR@20 %.3f SR AUC %.3f", i, key, ope.pr[20], ope.auc)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "grid.csv", "w") as fh:
        fh.write("experiment,rates,precision_20,success_auc\n")
        fh.write("".join(f"{i},{k},{p:.6f},{a:.6f}\n" for i, k, p, a in rows))
    return EXIT_OK


# --------------------------------------------------------------------------- dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sivfn", description="RGB-T fusion tracker on synthetic sequences")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic RGB-T sequences")
    g.add_argument("--out", required=True)
    g.add_argument("--seqs", type=int, required=True)
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--attr", help="comma-separated attribute tags to enable")
    g.add_argument("--misalign", help="thermal offset DX,DY in pixels")
    g.add_argument("--illum", type=float)
    g.add_argument("--occlusion", type=float)
    g.add_argument("--start-index", type=int, default=0,
                   help="index of the first scene (use disjoint ranges for train/test)")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("pretrain", help="grayscale-surrogate pretraining")
    g.add_argument("--data", required=True)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pretrain)

    g = sub.add_parser("train", help="staged RGB-T fine-tuning")
    g.add_argument("--data", required=True)
    g.add_argument("--config")
    g.add_argument("--init", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("track", help="track one sequence")
    g.add_argument("--model", required=True)
    g.add_argument("--seq", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--mode", choices=MODES, default="fused")
    g.add_argument("--contrib", help="also write per-frame contribution vectors to this CSV")
    g.set_defaults(func=cmd_track)

    g = sub.add_parser("eval", help="one-pass evaluation of a dataset")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--mode", choices=MODES, default="fused")
    g.add_argument("--plot", action="store_true", help="write curves.svg")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--no-fps", action="store_true",
                   help="omit the wall-clock fps row so metrics.csv is reproducible")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("bench", help="tracking throughput")
    g.add_argument("--model", required=True)
    g.add_argument("--iters", type=int, default=50)
    g.add_argument("--reps", type=int, default=3)
    g.add_argument("--width", type=int, default=160)
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--out", help="metrics CSV for the result")
    g.set_defaults(func=cmd_bench)

    g = sub.add_parser("grid-coupling", help="train and score each coupling-rate vector")
    g.add_argument("--data", required=True)
    g.add_argument("--config")
    g.add_argument("--rates-file", help="rate vectors, one per line (default: the six"
                   " permutations of 0.25,0.5,0.75 over layers 2-4)")
    g.add_argument("--eval-data")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_grid_coupling)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
