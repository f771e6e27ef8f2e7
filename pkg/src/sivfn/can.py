"""Channel contribution aggregation over concatenated RGB-T features.

Squeeze by global average pooling, excite through two fully connected layers
(ReLU then sigmoid), scale every channel by its contribution weight and add
the input back::

    g = gap(x);  h = sigmoid(beta(relu(alpha(g))));  z = h * x + x
"""
from __future__ import annotations

import math

import numpy as np

from . import numkernel as nk
from .numkernel import ParamStore, Tensor

gap = nk.gap


class CanBlock:
    def __init__(self, store: ParamStore, channels: int, reduction: int = 4, seed: int = 0,
                 prefix: str = "can"):
        if channels < 1 or reduction < 1:
            raise ValueError("channels and reduction must be positive")
        hidden = max(1, channels // reduction)
        rng = np.random.default_rng(seed)
        self.channels = channels
        self.reduction = reduction
        self.hidden = hidden
        self.prefix = prefix
        b1, b2 = 1.0 / math.sqrt(channels), 1.0 / math.sqrt(hidden)
        self.alpha_w = store.add(f"{prefix}.alpha.w", rng.uniform(-b1, b1, (hidden, channels)))
        self.alpha_b = store.add(f"{prefix}.alpha.b", np.zeros(hidden))
        self.beta_w = store.add(f"{prefix}.beta.w", rng.uniform(-b2, b2, (channels, hidden)))
        self.beta_b = store.add(f"{prefix}.beta.b", np.zeros(channels))


def excite(block: CanBlock, g: Tensor) -> Tensor:
    if g.shape[-1] != block.channels:
        raise ValueError(f"excite: got {g.shape[-1]} channels, block expects {block.channels}")
    a = nk.relu(nk.linear(g, block.alpha_w, block.alpha_b))
    return nk.sigmoid(nk.linear(a, block.beta_w, block.beta_b))


def modulate(x: Tensor, h: Tensor) -> Tensor:
    """``z_c = h_c * x_c + x_c`` with ``h`` of shape ``(N, C)`` or ``(C,)``."""
    c = x.shape[1]
    if h.shape[-1] != c:
        raise ValueError(f"modulate: contribution length {h.shape[-1]} != channels {c}")
    h4 = nk.reshape(h, (-1, c, 1, 1) if h.ndim == 2 else (1, c, 1, 1))
    return nk.add(nk.mul(x, h4), x)


def can_forward(block: CanBlock | None, feat_rgb: Tensor, feat_t: Tensor,
                fixed_h: float | None = None) -> tuple[Tensor, Tensor]:
    """Concatenate (visible first), then gap -> excite -> modulate.

    ``fixed_h`` bypasses the excitation path with a constant contribution
    (the no-CAN ablation uses 0.5).
    """
    if feat_rgb.shape[0] != feat_t.shape[0] or feat_rgb.shape[2:] != feat_t.shape[2:]:
        raise ValueError(f"can_forward: feature shapes disagree: {feat_rgb.shape} vs {feat_t.shape}")
    x = nk.concat([feat_rgb, feat_t], axis=1)
    if fixed_h is not None:
        h = Tensor(np.full(x.shape[:2], fixed_h))
    else:
        h = excite(block, gap(x))
    return modulate(x, h), h
