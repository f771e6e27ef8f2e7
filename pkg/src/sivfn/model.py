"""The full fusion tracker network: coupled backbone -> contribution aggregation -> head."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numkernel as nk
from .can import CanBlock, can_forward
from .cffn import BackboneConfig, CffnBackbone, copy_untied
from .numkernel import ParamStore, Tensor
from .trackhead import (HeadOutput, HeadParams, MapGeometry, combine_scores, focal_loss,
                        head_forward, iou_loss, quality_loss, total_loss)

MODES = ("fused", "rgb", "t", "no-cffn", "no-can")
LUMA = np.array([0.299, 0.587, 0.114])


def luminance(rgb: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) -> (..., 1, H, W) with BT.601 weights."""
    y = np.moveaxis(rgb, -3, -1) @ LUMA.astype(rgb.dtype)
    return np.expand_dims(y, -3)


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    can_reduction: int = 4
    can_enabled: bool = True
    head_width: int = 16
    tower_layers: int = 2
    seed: int = 0


@dataclass
class ModelOutput:
    head: HeadOutput
    combined: Tensor
    h_template: Tensor
    h_search: Tensor


class SiamIVFN:
    def __init__(self, config: ModelConfig, store: ParamStore | None = None):
        self.config = config
        self.store = store if store is not None else ParamStore()
        self.backbone = CffnBackbone(self.store, config.backbone)
        fused = 2 * self.backbone.out_channels
        self.can = CanBlock(self.store, fused, config.can_reduction, seed=config.seed + 1)
        self.head = HeadParams(self.store, fused, config.head_width, config.tower_layers,
                               seed=config.seed + 2)
        self.stride = self.backbone.total_stride

    # ------------------------------------------------------------------ inputs

    @staticmethod
    def prepare_inputs(rgb: np.ndarray, thermal: np.ndarray, mode: str = "fused"
                       ) -> tuple[np.ndarray, np.ndarray]:
        """Apply the single-modality ablations by substituting one stream's input."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
        if mode == "rgb":
            thermal = luminance(rgb)
        elif mode == "t":
            rgb = np.repeat(thermal, 3, axis=-3)
        return rgb, thermal

    # ------------------------------------------------------------------ forward

    def features(self, rgb, thermal) -> tuple[Tensor, Tensor]:
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        thermal = thermal if isinstance(thermal, Tensor) else Tensor(thermal)
        f_rgb, f_t = self.backbone.forward_pair(rgb, thermal)
        fixed = None if self.config.can_enabled else 0.5
        return can_forward(self.can, f_rgb, f_t, fixed_h=fixed)

    def forward_features(self, z: Tensor, x: Tensor) -> tuple[HeadOutput, Tensor]:
        out = head_forward(self.head, z, x, self.stride)
        combined = combine_scores(out.cls, out.quality, self.head.combine, self.head.combine_b)
        out.combined = combined
        return out, combined

    def forward(self, z_rgb, z_t, x_rgb, x_t) -> ModelOutput:
        z, hz = self.features(z_rgb, z_t)
        x, hx = self.features(x_rgb, x_t)
        out, combined = self.forward_features(z, x)
        return ModelOutput(out, combined, hz, hx)

    def loss(self, output: ModelOutput, assignments, alpha: float = 0.25, gamma: float = 2.0,
             weights=(1.0, 1.0, 1.0)) -> tuple[Tensor, dict[str, float]]:
        # The combiner is trained through a focal term on the combined map.
        l_cls = nk.add(focal_loss(output.head.cls, assignments, alpha, gamma),
                       focal_loss(output.combined, assignments, alpha, gamma))
        l_q = quality_loss(output.head.quality, assignments)
        l_reg = iou_loss(output.head.reg, assignments)
        total = total_loss(l_cls, l_q, l_reg, weights)
        parts = {"cls": l_cls.item(), "quality": l_q.item(), "reg": l_reg.item(),
                 "total": total.item()}
        return total, parts

    # ------------------------------------------------------------------ geometry

    def feature_size(self, crop_size: int) -> int:
        return self.backbone.output_size(crop_size)

    def geometry(self, template_size: int, search_size: int) -> MapGeometry:
        tz = self.feature_size(template_size)
        sx = self.feature_size(search_size)
        size = sx - tz + 1 - 2 * self.config.tower_layers
        if size < 1:
            raise ValueError(f"search size {search_size} too small for template {template_size}")
        scale, offset = self.backbone.geometry()
        # cell u -> search feature u + (tz - 1)/2 + tower margin; +0.5 moves from pixel
        # index to continuous crop coordinates
        return MapGeometry(stride=scale,
                           offset=offset + 0.5 + scale * ((tz - 1) / 2 + self.config.tower_layers),
                           size=size)


def ablate(model: SiamIVFN, mode: str) -> SiamIVFN:
    """Return the model variant evaluated under ``mode``.

    ``no-cffn`` unties every coupled bank into per-stream copies (coupling
    rates 0); ``no-can`` replaces the contribution vector by 0.5.  Input
    substitution modes (``rgb``, ``t``) leave the network unchanged.
    """
    if mode == "no-can":
        variant = SiamIVFN.__new__(SiamIVFN)
        variant.__dict__.update(model.__dict__)
        variant.config = replace(model.config, can_enabled=False)
        return variant
    if mode == "no-cffn":
        rates = tuple(0.0 for _ in model.config.backbone.channels)
        variant = SiamIVFN(replace(model.config,
                                   backbone=replace(model.config.backbone, coupling_rates=rates)))
        copy_untied(model.backbone, variant.backbone)
        for name, t in model.store.items():
            if not name.startswith(model.backbone.prefix + "."):
                variant.store[name].data[...] = t.data
        return variant
    return model
