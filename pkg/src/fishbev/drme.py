"""Distortion-resilient multi-scale extraction.

Patch embedding -> small trainable transformer-style stand-in backbone ->
the last four hidden states reshaped to maps -> 1x1 lateral convs, resize
to a 2x/1x/0.5x/0.25x pyramid -> top-down FPN fusion. Only the finest fused
level is returned; it is what the spatial cross-attention samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ParamStore, Tensor, ops
from .tensor_core.ops import ShapeError, conv2d, interp_resize, layer_normalize, linear


@dataclass(frozen=True)
class PatchEmbedConfig:
    patch: int = 8
    dim: int = 32
    layers: int = 4
    in_channels: int = 3
    out_channels: int = 64
    scales: tuple[float, ...] = (2.0, 1.0, 0.5, 0.25)

    @property
    def taps(self) -> tuple[int, ...]:
        """1-based indices of the hidden states fed to fusion."""
        return tuple(range(self.layers - 3, self.layers + 1))


def init_drme(params: ParamStore, cfg: PatchEmbedConfig, prefix: str = "drme") -> None:
    D, P, Cin, Cf = cfg.dim, cfg.patch, cfg.in_channels, cfg.out_channels
    if cfg.layers < 4:
        raise ValueError("the backbone needs at least four layers to tap")
    params.add(f"{prefix}.patch.w", (Cin * P * P, D))
    params.add(f"{prefix}.patch.b", (D,), init="zeros")
    params.add(f"{prefix}.cls", (1, D), init="uniform", fan_in=D)
    for l in range(1, cfg.layers + 1):
        p = f"{prefix}.block{l}"
        params.add(f"{p}.ln.g", (D,), init="ones")
        params.add(f"{p}.ln.b", (D,), init="zeros")
        params.add(f"{p}.w1", (D, 2 * D))
        params.add(f"{p}.b1", (2 * D,), init="zeros")
        params.add(f"{p}.w2", (2 * D, D))
        params.add(f"{p}.b2", (D,), init="zeros")
    for i in range(4):
        params.add(f"{prefix}.lateral{i}.k", (Cf, D, 1, 1), fan_in=D)
        params.add(f"{prefix}.lateral{i}.b", (Cf,), init="zeros")
    params.add(f"{prefix}.smooth.k", (Cf, Cf, 3, 3), fan_in=9 * Cf)
    params.add(f"{prefix}.smooth.b", (Cf,), init="zeros")


def patchify(images: np.ndarray, P: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*P*P], patches in row-major order."""
    B, C, H, W = images.shape
    if H % P or W % P:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {P}")
    x = images.reshape(B, C, H // P, P, W // P, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // P) * (W // P), C * P * P)


def patch_embed(X, params: ParamStore, cfg: PatchEmbedConfig, prefix: str = "drme") -> Tensor:
    """Images [C, H, W] or [B, C, H, W] -> tokens [(B,) N+1, D], class token first."""
    imgs = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    tok = linear(patchify(imgs, cfg.patch), params[f"{prefix}.patch.w"], params[f"{prefix}.patch.b"])
    B = imgs.shape[0]
    cls = ops.broadcast_to(ops.reshape(params[f"{prefix}.cls"], (1, 1, cfg.dim)), (B, 1, cfg.dim))
    out = ops.concat([cls, tok], axis=1)
    return out[0] if single else out


def toy_backbone(tokens: Tensor, params: ParamStore, cfg: PatchEmbedConfig, prefix: str = "drme") -> list[Tensor]:
    """Pre-norm residual MLP blocks; returns all L hidden states."""
    states = []
    x = tokens
    for l in range(1, cfg.layers + 1):
        p = f"{prefix}.block{l}"
        h = layer_normalize(x, params[f"{p}.ln.g"], params[f"{p}.ln.b"])
        h = linear(ops.relu(linear(h, params[f"{p}.w1"], params[f"{p}.b1"])), params[f"{p}.w2"], params[f"{p}.b2"])
        x = x + h
        states.append(x)
    return states


def tokens_to_map(F: Tensor, h: int, w: int) -> Tensor:
    """Drop the class token and reshape [(B,) N+1, D] -> [(B,) D, h, w]."""
    n = F.shape[-2] - 1
    if n != h * w:
        raise ShapeError(f"{n} patch tokens cannot fill a {h}x{w} map")
    if F.ndim == 2:
        return ops.transpose(ops.reshape(F[1:], (h, w, F.shape[-1])), (2, 0, 1))
    B = F.shape[0]
    return ops.transpose(ops.reshape(F[:, 1:], (B, h, w, F.shape[-1])), (0, 3, 1, 2))


def level_sizes(h: int, w: int, scales) -> list[tuple[int, int]]:
    return [(max(1, int(round(h * s))), max(1, int(round(w * s)))) for s in scales]


def multiscale_fuse(maps: list[Tensor], params: ParamStore, cfg: PatchEmbedConfig, prefix: str = "drme") -> Tensor:
    """Lateral 1x1 convs, pyramid resize, top-down sum, 3x3 residual smoothing of the finest level."""
    if len(maps) != 4:
        raise ValueError(f"fusion expects 4 levels, got {len(maps)}")
    h, w = maps[0].shape[-2:]
    sizes = level_sizes(h, w, cfg.scales)
    laterals = []
    for i, (m, size) in enumerate(zip(maps, sizes)):
        lat = conv2d(m, params[f"{prefix}.lateral{i}.k"], bias=params[f"{prefix}.lateral{i}.b"])
        laterals.append(interp_resize(lat, size))
    inner = laterals[-1]
    for i in range(len(laterals) - 2, -1, -1):
        inner = laterals[i] + interp_resize(inner, sizes[i])
    smooth = conv2d(inner, params[f"{prefix}.smooth.k"], pad=1, bias=params[f"{prefix}.smooth.b"])
    return inner + smooth


def drme_forward(images, params: ParamStore, cfg: PatchEmbedConfig, prefix: str = "drme") -> Tensor:
    """[B, C, H, W] images -> fused feature maps [B, C_f, 2H/P, 2W/P] (default schedule)."""
    imgs = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    h, w = imgs.shape[-2] // cfg.patch, imgs.shape[-1] // cfg.patch
    states = toy_backbone(patch_embed(imgs, params, cfg, prefix), params, cfg, prefix)
    taps = [tokens_to_map(states[l - 1], h, w) for l in cfg.taps]
    return multiscale_fuse(taps, params, cfg, prefix)
