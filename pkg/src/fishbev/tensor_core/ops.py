"""Differentiable primitives.

Every op takes Tensors (or array-likes, treated as constants) and returns a
new Tensor, recording a backward closure on the active tape.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                -_unbroadcast(g, sb) if b.requires_grad else None)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * s, (a,), lambda g: (g * s,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 0:
        return make_result(np.ones_like(ad), (a,), lambda g: (None,), "power")
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Checked entry point for the basic elementwise family.

    Binary ops accept equal shapes or a scalar second operand; ``scale``
    takes a Python scalar.
    """
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](a)
    if op == "scale":
        if b is None or np.ndim(b.data if isinstance(b, Tensor) else b) != 0:
            raise ShapeError("scale needs a scalar factor")
        return scale(a, float(b.data if isinstance(b, Tensor) else b))
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} is binary")
        sa = as_tensor(a).shape
        sb = as_tensor(b).shape
        if sa != sb and len(sb) != 0 and sb != (1,):
            raise ShapeError(f"{op}: shapes {sa} and {sb} differ")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------ shaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return make_result(np.broadcast_to(a.data, shape).copy(), (a,),
                       lambda g: (_unbroadcast(g, src),), "broadcast_to")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src_shape, dt = a.shape, a.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dt)
        np.add.at(out, index, g)
        return (out,)

    return make_result(a.data[index], (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# --------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x, W, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b`` with W shaped [Din, Dout]."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {W.shape}")
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {W.shape}")
        inputs.append(b)
    xd, Wd = x.data, W.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ Wd
    if b is not None:
        out = out + b.data
    out_shape = xd.shape[:-1] + (Wd.shape[1],)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wd.T).reshape(xd.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_result(out.reshape(out_shape), inputs, bw, "linear")


# ------------------------------------------------------------ normalization


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layer_normalize(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_normalize: gain/bias must be ({C},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gain, bias), bw, "layer_norm")


# ------------------------------------------------------------- convolution


def conv2d(x, k, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Cross-correlation with zero padding.

    x is [Cin, H, W] or [B, Cin, H, W]; k is [Cout, Cin, kh, kw].
    """
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = k.data
    if k.ndim != 4 or xd.ndim != 4 or kd.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {k.shape}")
    B, Cin, H, W = xd.shape
    Cout, _, kh, kw = kd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # [B, Cin, Ho, Wo, kh, kw]
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = [x, k]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        gx = gk = None
        if k.requires_grad:
            gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g4, kd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += contrib
            gx = gp[:, :, pad:pad + H, pad:pad + W] if pad else gp
            if squeeze:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out[0] if squeeze else out, inputs, bw, "conv2d")


# ------------------------------------------------------------ resampling


def bilinear_sample(fmap, pts) -> Tensor:
    """Sample ``fmap`` at fractional pixel coordinates (u=column, v=row).

    fmap [C, H, W] with pts [N, 2] gives [N, C]; fmap [B, C, H, W] with pts
    [B, N, 2] gives [B, N, C]. Neighbours outside the map read as zero.
    Gradients flow to both the map and the coordinates.
    """
    fmap, pts = as_tensor(fmap), as_tensor(pts)
    squeeze = fmap.ndim == 3
    md = fmap.data[None] if squeeze else fmap.data
    pd = pts.data[None] if squeeze else pts.data
    B, C, H, W = md.shape
    if pd.ndim != 3 or pd.shape[0] != B or pd.shape[2] != 2:
        raise ShapeError(f"bilinear_sample: map {fmap.shape} vs points {pts.shape}")
    N = pd.shape[1]
    u, v = pd[..., 0].reshape(-1), pd[..., 1].reshape(-1)
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx, fy = u - x0, v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = md.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    base = np.repeat(np.arange(B) * (H * W), N)
    # per corner: (dx, dy, weight, d weight / du, d weight / dv)
    corners = ((0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
               (1, 0, fx * (1 - fy), 1 - fy, -fx),
               (0, 1, (1 - fx) * fy, -fy, 1 - fx),
               (1, 1, fx * fy, fy, fx))
    rows, cols, w, wu, wv = [], [], [], [], []
    for dx, dy, cw, cu, cv in corners:
        xi, yi = x0 + dx, y0 + dy
        ok = np.flatnonzero((xi >= 0) & (xi < W) & (yi >= 0) & (yi < H))
        rows.append(ok)
        cols.append(base[ok] + yi[ok] * W + xi[ok])
        w.append(cw[ok])
        wu.append(cu[ok])
        wv.append(cv[ok])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    shape = (B * N, B * H * W)
    S = sp.csr_matrix((np.concatenate(w), (rows, cols)), shape=shape)
    out = np.asarray(S @ flat).reshape(B, N, C).astype(md.dtype, copy=False)

    def bw(g):
        gm = gp = None
        g2 = g.reshape(B * N, C)
        if fmap.requires_grad:
            gflat = np.asarray(S.T @ g2)
            gm = gflat.reshape(B, H, W, C).transpose(0, 3, 1, 2)
            if squeeze:
                gm = gm[0]
        if pts.requires_grad:
            Su = sp.csr_matrix((np.concatenate(wu), (rows, cols)), shape=shape)
            Sv = sp.csr_matrix((np.concatenate(wv), (rows, cols)), shape=shape)
            gu = np.einsum("nc,nc->n", g2, np.asarray(Su @ flat))
            gv = np.einsum("nc,nc->n", g2, np.asarray(Sv @ flat))
            gp = np.stack([gu, gv], axis=-1).reshape(B, N, 2)
            if squeeze:
                gp = gp[0]
        return gm, gp

    return make_result(out[0] if squeeze else out, (fmap, pts), bw, "bilinear_sample")


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] linear interpolation weights, align-corners=false."""
    if n_out < 1 or n_in < 1:
        raise ValueError("resize extents must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    R = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(R, (rows, i0), 1.0 - lam)
    np.add.at(R, (rows, i1), lam)
    return R


def interp_resize(x, target: tuple[int, int]) -> Tensor:
    """Bilinear resize of the trailing two axes to ``target`` (H2, W2)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    H2, W2 = target
    if (H2, W2) == (H, W):
        return x
    Ry = resize_matrix(H, H2).astype(x.dtype)
    Rx = resize_matrix(W, W2).astype(x.dtype)
    out = Ry @ x.data @ Rx.T

    def bw(g):
        return (Ry.T @ g @ Rx,)

    return make_result(out, (x,), bw, "interp_resize")


# ------------------------------------------------------------ regularizers


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, mask.astype(x.dtype))
