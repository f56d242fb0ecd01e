"""BEV encoder: stacked blocks of gated temporal attention, uncertainty-aware
spatial cross-attention and a feed-forward layer, run over BEV queries.

Queries live in row-major (v, u) order on a BEVGrid. Camera feature maps are
sampled in feature-map pixel coordinates; reference points arrive in image
pixels and are rescaled once in EncoderContext.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import BEVGrid, CameraRig, ReferencePoints, bev_reference_points
from .tensor_core import ParamStore, Tensor, no_tape, ops
from .tensor_core.ops import bilinear_sample, dropout, layer_normalize, linear

OFFSET_RANGE = 3.0
LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0


@dataclass(frozen=True)
class GatingConfig:
    kappa: float = 10.0
    delta: float = 0.8

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")


@dataclass(frozen=True)
class FusionConfig:
    points: int = 4          # K, sampling points per camera / frame
    mc_samples: int = 4      # K_MC during training
    mc_samples_diag: int = 32
    xi: float = 1e-6
    log_var_prior: float = -4.0
    kl_weight: float = 0.01

    def __post_init__(self):
        if self.points < 1 or self.mc_samples < 1:
            raise ValueError("points and mc_samples must be >= 1")
        if self.xi <= 0:
            raise ValueError("xi must be positive")


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 2
    dim: int = 64
    dropout: float = 0.1
    uncertainty_fusion: str = "on"   # on | uniform
    distance_gating: str = "on"      # on | off
    gating: GatingConfig = field(default_factory=GatingConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("need at least one encoder block")
        if self.uncertainty_fusion not in ("on", "uniform"):
            raise ValueError(f"uncertainty_fusion must be on|uniform, got {self.uncertainty_fusion!r}")
        if self.distance_gating not in ("on", "off"):
            raise ValueError(f"distance_gating must be on|off, got {self.distance_gating!r}")


@dataclass
class UncertaintyEstimate:
    mu: Tensor
    logvar: Tensor

    @property
    def var(self) -> Tensor:
        return ops.exp(self.logvar)


@dataclass
class EncoderContext:
    """Everything about the rig and grid that stays fixed across samples."""

    grid: BEVGrid
    refs: ReferencePoints
    feat_uv: np.ndarray       # [N_q, N_c, N_a, 2] reference points in feature-map pixels
    anchor_weight: np.ndarray  # [N_q, N_c, N_a], averages over visible anchors
    gamma: np.ndarray         # [N_q] distance gate

    @classmethod
    def build(cls, grid: BEVGrid, rig: CameraRig, feat_hw: tuple[int, int], cfg: EncoderConfig):
        refs = bev_reference_points(grid, rig)
        H, W = rig[0].intrinsics.height, rig[0].intrinsics.width
        Hf, Wf = feat_hw
        scale = np.array([Wf / W, Hf / H])
        uv = np.where(refs.anchor_visible[..., None], refs.uv, -1e3)
        feat_uv = (uv + 0.5) * scale - 0.5
        vis = refs.anchor_visible.astype(np.float64)
        anchor_weight = vis / np.maximum(vis.sum(axis=-1, keepdims=True), 1.0)
        if cfg.distance_gating == "on":
            gamma = gating_factor(center_distance(grid.positions(), grid), cfg.gating)
        else:
            gamma = np.full(grid.num_queries, 0.5)
        return cls(grid, refs, feat_uv, anchor_weight, gamma)


# ------------------------------------------------------------ parameters


def ring_offsets(K: int, radius: float = 1.0) -> np.ndarray:
    """K points evenly spaced on a circle, [K, 2] (du, dv)."""
    if K == 1:
        return np.zeros((1, 2))
    a = 2 * np.pi * np.arange(K) / K
    return radius * np.stack([np.cos(a), np.sin(a)], axis=-1)


def _offset_bias(K: int, frames: int = 1) -> np.ndarray:
    raw = np.arctanh(ring_offsets(K) / OFFSET_RANGE)
    return np.tile(raw.reshape(-1), frames)


def init_encoder(params: ParamStore, grid: BEVGrid, cfg: EncoderConfig, prefix: str = "enc") -> None:
    C, K, Nq = cfg.dim, cfg.fusion.points, grid.num_queries
    params.add(f"{prefix}.query", (Nq, C), fan_in=C)
    params.add(f"{prefix}.pos", (Nq, C), fan_in=C)
    for b in range(cfg.blocks):
        p = f"{prefix}.block{b}"
        # temporal self-attention: one head shared by both frames
        params.add(f"{p}.tsa.off.w", (C, 2 * K), init="zeros")
        params.add(f"{p}.tsa.off.b", (2 * K,), init=_offset_bias(K))
        params.add(f"{p}.tsa.attn.w", (C, K), init="zeros")
        params.add(f"{p}.tsa.attn.b", (K,), init="zeros")
        params.add(f"{p}.tsa.out.w", (C, C))
        params.add(f"{p}.tsa.out.b", (C,), init="zeros")
        params.add(f"{p}.tsa.ln.g", (C,), init="ones")
        params.add(f"{p}.tsa.ln.b", (C,), init="zeros")
        # spatial cross-attention
        params.add(f"{p}.sca.off.w", (C, 2 * K), init="zeros")
        params.add(f"{p}.sca.off.b", (2 * K,), init=_offset_bias(K))
        params.add(f"{p}.sca.attn.w", (C, K), init="zeros")
        params.add(f"{p}.sca.attn.b", (K,), init="zeros")
        params.add(f"{p}.sca.mu.w1", (C, C))
        params.add(f"{p}.sca.mu.b1", (C,), init="zeros")
        params.add(f"{p}.sca.mu.w2", (C, C))
        params.add(f"{p}.sca.mu.b2", (C,), init="zeros")
        params.add(f"{p}.sca.lv.w1", (C, C))
        params.add(f"{p}.sca.lv.b1", (C,), init="zeros")
        params.add(f"{p}.sca.lv.w2", (C, C), init="zeros")
        params.add(f"{p}.sca.lv.b2", (C,), init=np.full(C, cfg.fusion.log_var_prior))
        params.add(f"{p}.sca.ln.g", (C,), init="ones")
        params.add(f"{p}.sca.ln.b", (C,), init="zeros")
        # feed-forward
        params.add(f"{p}.ffn.w1", (C, 2 * C))
        params.add(f"{p}.ffn.b1", (2 * C,), init="zeros")
        params.add(f"{p}.ffn.w2", (2 * C, C))
        params.add(f"{p}.ffn.b2", (C,), init="zeros")
        params.add(f"{p}.ffn.ln.g", (C,), init="ones")
        params.add(f"{p}.ffn.ln.b", (C,), init="zeros")


# ------------------------------------------------------------ deformable sampling


def sampling_heads(q, off_w, off_b, attn_w, attn_b, K: int) -> tuple[Tensor, Tensor]:
    """Offsets [N, K, 2] bounded to +-3 pixels and softmax weights [N, K]."""
    N = q.shape[0]
    off = ops.scale(ops.tanh(linear(q, off_w, off_b)), OFFSET_RANGE)
    attn = ops.softmax_lastdim(linear(q, attn_w, attn_b))
    return ops.reshape(off, (N, K, 2)), attn


def deformable_attend(q, fmap, p_ref, off_w, off_b, attn_w, attn_b) -> Tensor:
    """Single-map deformable attention for a batch of queries.

    q [N, C] (or [C]), fmap [C, H, W], p_ref [N, 2] (u, v) map pixels -> [N, C_map].
    """
    q = ops.reshape(q, (1, -1)) if q.ndim == 1 else q
    p_ref = np.asarray(p_ref, dtype=np.float64).reshape(-1, 2)
    K = attn_b.shape[-1]
    off, attn = sampling_heads(q, off_w, off_b, attn_w, attn_b, K)
    N = q.shape[0]
    pts = off + p_ref[:, None, :]
    vals = ops.reshape(bilinear_sample(fmap, ops.reshape(pts, (N * K, 2))), (N, K, -1))
    return ops.sum(vals * ops.reshape(attn, (N, K, 1)), axis=1)


# ------------------------------------------------------------ uncertainty fusion


def estimate_uncertainty(f, mu_w1, mu_b1, mu_w2, mu_b2, lv_w1, lv_b1, lv_w2, lv_b2) -> UncertaintyEstimate:
    mu = linear(ops.relu(linear(f, mu_w1, mu_b1)), mu_w2, mu_b2)
    lv = linear(ops.relu(linear(f, lv_w1, lv_b1)), lv_w2, lv_b2)
    return UncertaintyEstimate(mu, ops.clamp(lv, LOGVAR_MIN, LOGVAR_MAX))


def reparameterize(est: UncertaintyEstimate, eps) -> Tensor:
    """z = mu + exp(logvar / 2) * eps; eps may carry extra leading sample axes."""
    return est.mu + ops.exp(ops.scale(est.logvar, 0.5)) * np.asarray(eps, dtype=np.float64)


def precision_fuse(z, var, M, xi: float = 1e-6, uniform: bool = False) -> Tensor:
    """Masked precision-weighted mean over the camera axis (-2).

    z [..., N_q, N_c, C], var [N_q, N_c, C], M [N_q, N_c] in {0, 1} -> [..., N_q, C].
    """
    M = np.asarray(M, dtype=np.float64)[..., None]
    if uniform:
        w = Tensor(np.broadcast_to(M, np.shape(var.data if isinstance(var, Tensor) else var)).copy())
    else:
        w = ops.div(1.0, ops.add(var, xi)) * M
    num = ops.sum(z * w, axis=-2)
    den = ops.add(ops.sum(w, axis=-2), xi)
    return ops.div(num, den)


def mc_fuse(est: UncertaintyEstimate, M, fusion: FusionConfig, rng: np.random.Generator,
            samples: int | None = None, with_conf: bool = True, uniform: bool = False):
    """Monte-Carlo precision fusion -> (mean fused feature [N_q, C], conf [N_q] or None)."""
    S = samples or fusion.mc_samples
    if with_conf and S < 2:
        raise ValueError("conf needs at least 2 Monte-Carlo samples (unbiased variance)")
    eps = rng.standard_normal((S,) + est.mu.shape)
    z = reparameterize(est, eps)
    fused = precision_fuse(z, est.var, M, fusion.xi, uniform=uniform)
    f = ops.mean(fused, axis=0)
    conf = None
    if with_conf:
        conf = np.var(fused.data, axis=0, ddof=1).mean(axis=-1)
    return f, conf


def kl_regularizer(est: UncertaintyEstimate, log_var_prior: float = -4.0) -> Tensor:
    """Mean over every element of KL(N(mu, var) || N(0, var_prior))."""
    var = est.var
    vp = math.exp(log_var_prior)
    term = ops.scale(ops.add(var, est.mu * est.mu), 1.0 / vp)
    kl = ops.add(term - est.logvar, log_var_prior - 1.0)
    return ops.scale(ops.mean(kl), 0.5)


def camera_features(q, maps, ctx: EncoderContext, off_w, off_b, attn_w, attn_b) -> Tensor:
    """Anchor-averaged deformable samples from every camera -> [N_q, N_c, C]."""
    Nq, Nc, Na, _ = ctx.feat_uv.shape
    K = attn_b.shape[-1]
    off, attn = sampling_heads(q, off_w, off_b, attn_w, attn_b, K)
    # pts [N_c, N_q * N_a * K, 2]
    ref = ctx.feat_uv.transpose(1, 0, 2, 3)[:, :, :, None, :]
    pts = ops.reshape(ops.reshape(off, (1, Nq, 1, K, 2)) + ref, (Nc, Nq * Na * K, 2))
    vals = bilinear_sample(maps, pts)  # [N_c, N_q*N_a*K, C]
    C = vals.shape[-1]
    vals = ops.reshape(vals, (Nc, Nq, Na, K, C))
    coef = ops.reshape(attn, (1, Nq, 1, K, 1)) * ctx.anchor_weight.transpose(1, 0, 2)[:, :, :, None, None]
    f = ops.sum(ops.reshape(vals * coef, (Nc, Nq, Na * K, C)), axis=2)
    return ops.transpose(f, (1, 0, 2))


def usca_block(Q, maps, ctx: EncoderContext, params: ParamStore, p: str, cfg: EncoderConfig,
               rng: np.random.Generator, logvar_override=None, samples: int | None = None,
               mask=None, return_parts: bool = False):
    """Cross-attend cameras, fuse per-camera Gaussians, residual + layer norm.

    Returns (queries, kl, conf) and, with return_parts, the fused feature and estimate.
    """
    P = lambda k: params[f"{p}.sca.{k}"]  # noqa: E731
    q = Q + params[ctx_pos_name(p)]
    f = camera_features(q, maps, ctx, P("off.w"), P("off.b"), P("attn.w"), P("attn.b"))
    est = estimate_uncertainty(f, P("mu.w1"), P("mu.b1"), P("mu.w2"), P("mu.b2"),
                               P("lv.w1"), P("lv.b1"), P("lv.w2"), P("lv.b2"))
    if logvar_override is not None:
        lv = logvar_override(est.logvar) if callable(logvar_override) else logvar_override
        est = UncertaintyEstimate(est.mu, lv if isinstance(lv, Tensor) else Tensor(lv))
    M = ctx.refs.mask if mask is None else mask
    fusion = cfg.fusion
    if cfg.uncertainty_fusion == "uniform":
        fused = precision_fuse(est.mu, est.var, M, fusion.xi, uniform=True)
        kl, conf = None, None
    else:
        n = samples or fusion.mc_samples
        fused, conf = mc_fuse(est, M, fusion, rng, samples=n, with_conf=n >= 2)
        kl = kl_regularizer(est, fusion.log_var_prior)
    out = layer_normalize(Q + fused, P("ln.g"), P("ln.b"))
    if return_parts:
        return out, kl, conf, fused, est
    return out, kl, conf


def ctx_pos_name(block_prefix: str) -> str:
    return block_prefix.rsplit(".block", 1)[0] + ".pos"


# ------------------------------------------------------------ distance-aware temporal attention


def center_distance(p, grid: BEVGrid) -> np.ndarray:
    """Normalised distance of cell coords [..., 2] (u, v) to the grid centre."""
    p = np.asarray(p, dtype=np.float64)
    O = np.array(grid.center)
    return np.linalg.norm(p - O, axis=-1) / grid.radius


def gating_factor(dbar, cfg: GatingConfig) -> np.ndarray:
    x = cfg.kappa * (cfg.delta - np.asarray(dbar, dtype=np.float64))
    # stable logistic
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def gated_weights(w_prev, w_cur, gamma):
    """Scale per-frame softmax weights [N, K] by (1 - gamma) and gamma."""
    g = ops.reshape(gamma if isinstance(gamma, Tensor) else Tensor(np.asarray(gamma, float)), (-1, 1))
    return ops.mul(w_prev, ops.sub(1.0, g)), ops.mul(w_cur, g)


def gated_temporal_attend(Q_t, Q_prev, ctx: EncoderContext, params: ParamStore, p: str,
                          gamma=None, return_parts: bool = False):
    """Two-frame deformable self-attention blended by the distance gate.

    Q_t, Q_prev [N_q, C] (Q_prev=None on the first frame). The sampling heads
    are shared between frames and read each frame's own query at the cell.
    """
    P = lambda k: params[f"{p}.tsa.{k}"]  # noqa: E731
    if Q_prev is None:
        Q_prev = Q_t
    grid = ctx.grid
    H, W, C = grid.height, grid.width, Q_t.shape[-1]
    pos = params[ctx_pos_name(p)]
    K = P("attn.b").shape[-1]
    ref = grid.positions()
    g = ctx.gamma if gamma is None else np.broadcast_to(np.asarray(gamma, float), (grid.num_queries,))
    terms, weights = [], []
    for Q in (Q_prev, Q_t):
        off, attn = sampling_heads(Q + pos, P("off.w"), P("off.b"), P("attn.w"), P("attn.b"), K)
        fmap = ops.reshape(ops.transpose(Q, (1, 0)), (C, H, W))
        pts = ops.reshape(off + ref[:, None, :], (-1, 2))
        terms.append(ops.reshape(bilinear_sample(fmap, pts), (-1, K, C)))
        weights.append(attn)
    w_prev, w_cur = gated_weights(weights[0], weights[1], g)
    fused = ops.sum(terms[0] * ops.reshape(w_prev, (-1, K, 1)), axis=1) \
        + ops.sum(terms[1] * ops.reshape(w_cur, (-1, K, 1)), axis=1)
    out = layer_normalize(Q_t + linear(fused, P("out.w"), P("out.b")), P("ln.g"), P("ln.b"))
    if return_parts:
        return out, fused, (w_prev, w_cur)
    return out


# ------------------------------------------------------------ alignment, FFN, full encoder


def ego_align(grid_prev, delta, grid: BEVGrid) -> Tensor:
    """Resample the previous BEV map [C, H, W] into the current ego frame.

    ``delta`` = (dx, dy, dyaw): the current ego pose expressed in the previous
    ego frame (metres, radians). Cells that come from outside the previous
    grid read as zero.
    """
    dx, dy, dyaw = (float(v) for v in delta)
    if dx == 0.0 and dy == 0.0 and dyaw == 0.0:
        return grid_prev if isinstance(grid_prev, Tensor) else Tensor(grid_prev)
    c, s = math.cos(dyaw), math.sin(dyaw)
    xy = grid.cell_to_ego(grid.positions())
    prev_xy = np.stack([c * xy[:, 0] - s * xy[:, 1] + dx, s * xy[:, 0] + c * xy[:, 1] + dy], axis=-1)
    uv = grid.ego_to_cell(prev_xy)
    vals = bilinear_sample(grid_prev, uv)  # [N_q, C]
    C = vals.shape[-1]
    return ops.reshape(ops.transpose(vals, (1, 0)), (C, grid.height, grid.width))


def queries_to_grid(Q, grid: BEVGrid) -> Tensor:
    return ops.reshape(ops.transpose(Q, (1, 0)), (Q.shape[-1], grid.height, grid.width))


def grid_to_queries(G) -> Tensor:
    C = G.shape[0]
    return ops.transpose(ops.reshape(G, (C, -1)), (1, 0))


def ffn_forward(x, params: ParamStore, p: str, rate: float = 0.0, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
    P = lambda k: params[f"{p}.ffn.{k}"]  # noqa: E731
    h = dropout(ops.relu(linear(x, P("w1"), P("b1"))), rate, training, rng)
    h = dropout(linear(h, P("w2"), P("b2")), rate, training, rng)
    return layer_normalize(x + h, P("ln.g"), P("ln.b"))


def encoder_frame(maps, Q_prev, ctx: EncoderContext, params: ParamStore, cfg: EncoderConfig,
                  rng: np.random.Generator, training: bool = False, prefix: str = "enc",
                  samples: int | None = None):
    """One frame through every block -> (queries, mean KL over blocks or None, conf per block)."""
    Q = params[f"{prefix}.query"]
    kls, confs = [], []
    for b in range(cfg.blocks):
        p = f"{prefix}.block{b}"
        Q = gated_temporal_attend(Q, Q_prev, ctx, params, p)
        Q, kl, conf = usca_block(Q, maps, ctx, params, p, cfg, rng, samples=samples)
        Q = ffn_forward(Q, params, p, cfg.dropout, training, rng)
        if kl is not None:
            kls.append(kl)
        confs.append(conf)
    kl = ops.scale(_sum(kls), 1.0 / len(kls)) if kls else None
    return Q, kl, confs


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


def encoder_forward(frames: Sequence, deltas: Sequence, ctx: EncoderContext, params: ParamStore,
                    cfg: EncoderConfig, rng: np.random.Generator, training: bool = False,
                    prefix: str = "enc", detach_history: bool = True, samples: int | None = None):
    """Run a frame sequence recurrently; returns (last-frame queries, KL, conf list).

    ``frames[t]`` is a camera feature stack [N_c, C, Hf, Wf] or a zero-argument
    callable producing one. ``deltas[t]`` is the ego motion from frame t-1 to
    t (ignored for t = 0). With detach_history, earlier frames run without the
    tape and only the last frame carries gradients.
    """
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    Q_prev = None
    T = len(frames)
    for t in range(T):
        last = t == T - 1
        def run():
            maps = frames[t]() if callable(frames[t]) else frames[t]
            prev = None
            if Q_prev is not None:
                prev = grid_to_queries(ego_align(queries_to_grid(Q_prev, ctx.grid), deltas[t], ctx.grid))
            return encoder_frame(maps, prev, ctx, params, cfg, rng, training, prefix, samples)
        if detach_history and not last:
            with no_tape():
                Q, kl, confs = run()
            Q = Tensor(Q.data)
        else:
            Q, kl, confs = run()
        Q_prev = Q
    return Q, kl, confs
