"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor, backward, no_tape


def _scalar(f, params) -> float:
    with no_tape():
        val = f(params)
    val = float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) else float(val)
    if not np.isfinite(val):
        raise FloatingPointError("objective is not finite")
    return val


def gradient_errors(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    coords_per_param: int = 6,
    seed: int = 0,
    names: list[str] | None = None,
    corrupt: float = 0.0,
) -> dict[str, float]:
    """Per-parameter max of |analytic - numeric| / max(1, |numeric|).

    ``f`` must be deterministic (build any rng inside it from a fixed seed).
    Up to ``coords_per_param`` coordinates are sampled per tensor. ``corrupt``
    perturbs the analytic gradient by that relative amount (negative control).
    """
    params.zero_grad()
    with Tape() as tape:
        loss = f(params)
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("objective is not finite")
    backward(loss, tape, params)
    analytic = {k: params.grad(k).copy() * (1.0 + corrupt) for k in params}
    if corrupt:
        # keep the control meaningful even where the true gradient is zero
        analytic = {k: g + corrupt for k, g in analytic.items()}
    rng = np.random.default_rng(seed)
    errors = {}
    for name in names or params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        n = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, params)
            flat[i] = orig - h
            fm = _scalar(f, params)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
        errors[name] = worst
    params.zero_grad()
    return errors


def finite_diff_check(f, params: ParamStore, h: float = 1e-5, **kw) -> float:
    """Max relative error between tape gradients and central differences."""
    errs = gradient_errors(f, params, h=h, **kw)
    return max(errs.values()) if errs else 0.0
