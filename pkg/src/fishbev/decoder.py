"""Mask decoder and the training objective (focal loss plus weighted KL)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ParamStore, Tensor, ops
from .tensor_core.ops import conv2d, interp_resize, linear

NUM_CLASSES = 6
VOID = 0
CLASS_NAMES = ("void", "road", "sidewalk", "vegetation", "vehicle", "ego")


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("focal alpha must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")


def init_decoder(params: ParamStore, dim: int, prefix: str = "dec") -> None:
    params.add(f"{prefix}.proj.w", (dim, NUM_CLASSES))
    params.add(f"{prefix}.proj.b", (NUM_CLASSES,), init="zeros")
    params.add(f"{prefix}.refine.k", (NUM_CLASSES, NUM_CLASSES, 3, 3), fan_in=9 * NUM_CLASSES)
    params.add(f"{prefix}.refine.b", (NUM_CLASSES,), init="zeros")


def mask_head_decode(queries, params: ParamStore, bev_hw: tuple[int, int], target_res: tuple[int, int] | None = None,
                     prefix: str = "dec") -> Tensor:
    """Queries [N_q, C] -> logits [C_stuff, H_out, W_out].

    Per-query class projection, bilinear upsampling, then a residual 3x3 refinement.
    """
    H, W = bev_hw
    if queries.shape[0] != H * W:
        raise ValueError(f"{queries.shape[0]} queries do not fill a {H}x{W} grid")
    logits = linear(queries, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    S = ops.reshape(ops.transpose(logits, (1, 0)), (NUM_CLASSES, H, W))
    S = interp_resize(S, target_res or (H, W))
    return S + conv2d(S, params[f"{prefix}.refine.k"], pad=1, bias=params[f"{prefix}.refine.b"])


def focal_loss(S, Y, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """Mean focal loss over non-void pixels.

    S [C, H, W] or [B, C, H, W] logits; Y integer class map of matching spatial shape.
    """
    S = S if isinstance(S, Tensor) else Tensor(S)
    Y = np.asarray(Y)
    if Y.size and (Y.min() < 0 or Y.max() >= NUM_CLASSES or np.any(Y != np.round(Y))):
        raise ValueError(f"labels must be integers in [0, {NUM_CLASSES})")
    Y = Y.astype(np.int64)
    axis = 0 if S.ndim == 3 else 1
    logp = ops.log_softmax(S, axis=axis)
    onehot = np.moveaxis(np.eye(NUM_CLASSES)[Y], -1, axis)
    logpt = ops.sum(logp * onehot, axis=axis)
    scored = (Y != VOID).astype(np.float64)
    n = scored.sum()
    if n == 0:
        return ops.scale(ops.sum(logpt), 0.0)
    pt = ops.exp(logpt)
    mod = ops.power(ops.sub(1.0, pt), cfg.gamma) if cfg.gamma != 0 else 1.0
    per_pixel = ops.mul(mod, logpt) * scored
    return ops.scale(ops.sum(per_pixel), -cfg.alpha / n)


def total_loss(focal, kl, kl_weight: float = 0.01) -> Tensor:
    if kl_weight < 0:
        raise ValueError("kl weight must be >= 0")
    if kl is None or kl_weight == 0:
        return focal if isinstance(focal, Tensor) else Tensor(np.asarray(focal, float))
    return ops.add(focal, ops.scale(kl, kl_weight))
