"""Two-stream backbone with partially coupled filter banks.

Each layer owns three banks: ``shared`` (used by both streams), ``rgb`` and
``thermal``.  A stream's effective filter set is ``shared`` followed by its own
bank, so both streams see ``n`` filters.  The shared bank is a single
parameter slot; gradients from the two streams therefore add up in one
accumulator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .numkernel import ParamStore, Tensor

STREAMS = ("rgb", "thermal")

PRESETS = {
    "tiny": (8, 16, 32, 64),
    "full": (32, 64, 128, 256),
}
DEFAULT_RATES = (0.0, 0.25, 0.5, 0.75)


def coupling_counts(filters: Sequence[int], rates: Sequence[float]) -> list[tuple[int, int]]:
    """Per layer ``(coupled, uncoupled)`` filter counts, ``k = round(R * n)`` (ties to even)."""
    if len(filters) != len(rates):
        raise ValueError(f"{len(filters)} layer widths but {len(rates)} coupling rates")
    counts = []
    for n, r in zip(filters, rates):
        if n < 1:
            raise ValueError(f"filter count must be >= 1, got {n}")
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"coupling rate must be in [0, 1], got {r}")
        k = round(r * n)
        counts.append((k, n - k))
    return counts


@dataclass(frozen=True)
class CouplingSpec:
    filters: tuple[int, ...]
    rates: tuple[float, ...]

    @property
    def coupled(self) -> tuple[int, ...]:
        return tuple(k for k, _ in coupling_counts(self.filters, self.rates))

    def reconciled(self) -> "CouplingSpec":
        return CouplingSpec(self.filters, tuple(k / n for k, n in zip(self.coupled, self.filters)))


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = PRESETS["tiny"]
    kernels: tuple[int, ...] = (7, 5, 3, 3)
    strides: tuple[int, ...] = (2, 1, 1, 1)
    pool_after: tuple[int, ...] = (1, 2)  # 1-based layer indices followed by a 2x max-pool
    coupling_rates: tuple[float, ...] = DEFAULT_RATES
    in_channels: int = 3
    seed: int = 0

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown backbone preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(channels=PRESETS[name], **overrides)


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CoupledConvLayer:
    def __init__(self, store: ParamStore, name: str, in_channels: int, filters: int,
                 coupled: int, kernel: int, stride: int, rng: np.random.Generator):
        self.name = name
        self.in_channels = in_channels
        self.filters = filters
        self.coupled = coupled
        self.kernel = kernel
        self.stride = stride
        shape = (in_channels, kernel, kernel)
        self.banks: dict[str, tuple[Tensor, Tensor] | None] = {}
        for bank, count in (("shared", coupled), ("rgb", filters - coupled),
                            ("thermal", filters - coupled)):
            if count == 0:
                self.banks[bank] = None
                continue
            w = store.add(f"{name}.{bank}.w", _fan_in_uniform(rng, (count, *shape)))
            b = store.add(f"{name}.{bank}.b", np.zeros(count))
            self.banks[bank] = (w, b)

    def effective(self, stream: str) -> tuple[Tensor, Tensor]:
        """The stream's ``n`` filters: shared bank first, then its own bank."""
        parts = [p for p in (self.banks["shared"], self.banks[stream]) if p is not None]
        if len(parts) == 1:
            return parts[0]
        return nk.concat([p[0] for p in parts], axis=0), nk.concat([p[1] for p in parts], axis=0)

    def __call__(self, x: Tensor, stream: str) -> Tensor:
        w, b = self.effective(stream)
        return nk.conv2d(x, w, b, self.stride)


class CffnBackbone:
    """Coupled two-stream conv stack.  Thermal input is lifted 1 -> 3 channels by a 1x1 conv."""

    def __init__(self, store: ParamStore, config: BackboneConfig, prefix: str = "cffn"):
        n_layers = len(config.channels)
        if not (len(config.kernels) == len(config.strides) == len(config.coupling_rates)
                == n_layers):
            raise ValueError("backbone config lists disagree in length: channels "
                             f"{config.channels}, kernels {config.kernels}, strides "
                             f"{config.strides}, rates {config.coupling_rates}")
        if any(p < 1 or p > n_layers for p in config.pool_after):
            raise ValueError(f"pool_after {config.pool_after} refers to a missing layer")
        if any(k < 1 for k in config.kernels) or any(s < 1 for s in config.strides):
            raise ValueError("kernels and strides must be positive")
        self.config = config
        self.store = store
        self.prefix = prefix
        rng = np.random.default_rng(config.seed)
        c = config.in_channels
        self.adapter_w = store.add(f"{prefix}.thermal_adapter.w", _fan_in_uniform(rng, (c, 1, 1, 1)))
        self.adapter_b = store.add(f"{prefix}.thermal_adapter.b", np.zeros(c))
        self.layers: list[CoupledConvLayer] = []
        counts = coupling_counts(config.channels, config.coupling_rates)
        for i, (n, (k, _)) in enumerate(zip(config.channels, counts)):
            layer = CoupledConvLayer(store, f"{prefix}.conv{i + 1}", c, n, k, config.kernels[i],
                                     config.strides[i], rng)
            self.layers.append(layer)
            c = n
        self.out_channels = c

    @property
    def coupling(self) -> CouplingSpec:
        return CouplingSpec(tuple(self.config.channels),
                            tuple(self.config.coupling_rates)).reconciled()

    @property
    def total_stride(self) -> int:
        s = 1
        for i, layer in enumerate(self.layers, start=1):
            s *= layer.stride
            if i in self.config.pool_after:
                s *= 2
        return s

    def geometry(self) -> tuple[float, float]:
        """``(scale, offset)``: feature index ``i`` sits at input pixel ``scale * i + offset``."""
        scale, offset = 1.0, 0.0
        for i, layer in enumerate(self.layers, start=1):
            offset += scale * (layer.kernel - 1) / 2.0
            scale *= layer.stride
            if i in self.config.pool_after:
                offset += scale * 0.5
                scale *= 2
        return scale, offset

    def output_size(self, n: int) -> int:
        for i, layer in enumerate(self.layers, start=1):
            n = nk.conv_output_size(n, layer.kernel, layer.stride)
            if i in self.config.pool_after:
                n //= 2
            if n < 1:
                raise ValueError("input too small for the backbone")
        return n

    def lift_thermal(self, thermal: Tensor) -> Tensor:
        return nk.conv2d(thermal, self.adapter_w, self.adapter_b)

    def forward_stream(self, x: Tensor, stream: str) -> Tensor:
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        for i, layer in enumerate(self.layers, start=1):
            x = nk.relu(layer(x, stream))
            if i in self.config.pool_after:
                x = nk.maxpool2d(x, 2)
        return x

    def forward_lifted(self, rgb: Tensor, thermal3: Tensor) -> tuple[Tensor, Tensor]:
        """Both streams on inputs that already have ``in_channels`` channels."""
        return self.forward_stream(rgb, "rgb"), self.forward_stream(thermal3, "thermal")

    def forward_pair(self, rgb: Tensor, thermal: Tensor) -> tuple[Tensor, Tensor]:
        if rgb.shape[2:] != thermal.shape[2:] or rgb.shape[0] != thermal.shape[0]:
            raise ValueError(f"modality shapes disagree: rgb {rgb.shape}, thermal {thermal.shape}")
        if rgb.shape[1] != self.config.in_channels:
            raise ValueError(f"rgb input needs {self.config.in_channels} channels, got {rgb.shape}")
        if thermal.shape[1] != 1:
            raise ValueError(f"thermal input needs 1 channel, got {thermal.shape}")
        return self.forward_lifted(rgb, self.lift_thermal(thermal))

    def param_groups(self) -> dict[str, list[str]]:
        """Slot names by role, used by the staged fine-tuning schedule."""
        groups: dict[str, list[str]] = {"shared": [], "rgb": [], "thermal": []}
        for name in self.store.names():
            if not name.startswith(self.prefix + "."):
                continue
            if ".thermal_adapter." in name or ".thermal." in name:
                groups["thermal"].append(name)
            elif ".shared." in name:
                groups["shared"].append(name)
            elif ".rgb." in name:
                groups["rgb"].append(name)
        return groups


def build_backbone(config: BackboneConfig, store: ParamStore | None = None,
                   prefix: str = "cffn") -> CffnBackbone:
    return CffnBackbone(store if store is not None else ParamStore(), config, prefix)


def copy_untied(src: CffnBackbone, dst: CffnBackbone) -> None:
    """Load ``src`` into the uncoupled backbone ``dst`` so both compute identical features.

    Each stream of ``dst`` receives its own copy of the shared filters, placed
    first so the effective filter order is unchanged.
    """
    if any(layer.coupled for layer in dst.layers):
        raise ValueError("destination backbone must have all coupling rates at 0")
    dst.adapter_w.data[...] = src.adapter_w.data
    dst.adapter_b.data[...] = src.adapter_b.data
    with nk.no_grad():
        for a, b in zip(src.layers, dst.layers):
            for stream in STREAMS:
                w, bias = a.effective(stream)
                dw, db = b.banks[stream]
                if dw.shape != w.shape:
                    raise ValueError(f"layer {a.name}: cannot copy {w.shape} into {dw.shape}")
                dw.data[...] = w.data
                db.data[...] = bias.data
