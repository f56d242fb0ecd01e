"""Training loop, evaluation and per-component gradient checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import Dataset
from .decoder import CLASS_NAMES, focal_loss, mask_head_decode, total_loss
from .encoder import (
    EncoderConfig,
    EncoderContext,
    deformable_attend,
    encoder_forward,
    estimate_uncertainty,
    ffn_forward,
    gated_temporal_attend,
    init_encoder,
    mc_fuse,
)
from .geometry import BEVGrid, default_rig
from .metrics import ConfusionMatrix, ious, miou
from .model import FishBEVModel
from .optim import AdamW
from .tensor_core import ParamStore, Tape, Tensor, backward, gradient_errors, ops


class TrainingError(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value!r} at step {step}")


LOG_HEADER = "step,epoch,lr,focal,kl,total"


def training_examples(ds: Dataset) -> list[tuple[int, int]]:
    """Every (scene, frame) pair; frame t is predicted from frames 0..t."""
    return [(i, t) for i in range(len(ds)) for t in range(len(ds[i]))]


def make_optimizer(model: FishBEVModel, cfg: RunConfig) -> AdamW:
    return AdamW(model.params, lr=cfg["optim.lr"], betas=(cfg["optim.beta1"], cfg["optim.beta2"]),
                 eps=cfg["optim.eps"], weight_decay=cfg["optim.weight_decay"], lr_decay=cfg["optim.lr_decay"])


@dataclass
class TrainResult:
    log: list[tuple] = field(default_factory=list)
    seconds: float = 0.0

    def focal(self) -> np.ndarray:
        return np.array([r[3] for r in self.log])


def train(model: FishBEVModel, ds: Dataset, cfg: RunConfig, out_dir=None, steps: int | None = None,
          on_step=None) -> TrainResult:
    """AdamW over shuffled (scene, frame) examples; ``batch`` examples per step.

    Stops after ``train.steps`` steps, or after ``train.epochs`` epochs when
    steps is 0. Writes ``loss.csv`` and a checkpoint per epoch into out_dir.
    """
    seed = cfg["run.seed"]
    examples = training_examples(ds)
    if not examples:
        raise ValueError("training set is empty")
    batch = cfg["train.batch"]
    steps = cfg["train.steps"] if steps is None else steps
    per_epoch = max(1, len(examples) // batch)
    if steps <= 0:
        steps = per_epoch * cfg["train.epochs"]
    opt = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir else None
    log_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss.csv", "w")
        log_fh.write(LOG_HEADER + "\n")
    result = TrainResult()
    t0 = time.perf_counter()
    order = []
    try:
        for step in range(1, steps + 1):
            epoch = (step - 1) // per_epoch
            if (step - 1) % per_epoch == 0:
                perm = np.random.default_rng([seed, epoch]).permutation(len(examples))
                order = [examples[i] for i in perm]
            pos = ((step - 1) % per_epoch) * batch
            model.params.zero_grad()
            rng = np.random.default_rng([seed, 1, step])
            foc = klv = tot = 0.0
            for scene, t in order[pos:pos + batch]:
                frames = ds[scene][: t + 1]
                with Tape() as tape:
                    total, focal, kl = model.loss(frames, rng, training=True)
                    total = ops.scale(total, 1.0 / batch)
                backward(total, tape, model.params)
                foc += focal.item() / batch
                klv += (kl.item() if kl is not None else 0.0) / batch
                tot += total.item()
            if not np.isfinite(tot):
                raise TrainingError(step, tot)
            opt.step()
            row = (step, epoch, opt.lr, foc, klv, tot)
            result.log.append(row)
            if log_fh:
                log_fh.write(",".join([str(step), str(epoch)] + [repr(float(v)) for v in row[2:]]) + "\n")
            if on_step:
                on_step(row)
            if step % per_epoch == 0:
                opt.end_epoch()
                if out:
                    model.params.save(out / "checkpoint")
    finally:
        if log_fh:
            log_fh.close()
    if out:
        model.params.save(out / "checkpoint")
    result.seconds = time.perf_counter() - t0
    return result


@dataclass
class EvalResult:
    cm: ConfusionMatrix
    predictions: list = field(default_factory=list)
    confs: list = field(default_factory=list)

    @property
    def miou(self) -> float:
        return miou(self.cm)

    def table(self) -> list[tuple[str, float]]:
        return [(CLASS_NAMES[c], v) for c, v in ious(self.cm).items()]


def evaluate(model: FishBEVModel, ds: Dataset, seed: int = 0, keep: bool = False,
             samples: int | None = None) -> EvalResult:
    """Confusion matrix over every frame of every scene (history = earlier frames)."""
    cm = ConfusionMatrix()
    res = EvalResult(cm)
    for i in range(len(ds)):
        seq = ds[i]
        for t in range(len(seq)):
            pred, confs = model.predict(seq[: t + 1], np.random.default_rng([seed, 2, i, t]), samples)
            cm.update(seq[t].bev_gt, pred)
            if keep:
                res.predictions.append(((i, t), pred))
                res.confs.append(((i, t), confs[-1]))
    return res


def format_log_row(row) -> str:
    step, epoch, lr, foc, kl, tot = row
    return ",".join([str(step), str(epoch)] + [repr(float(v)) for v in (lr, foc, kl, tot)])


# ------------------------------------------------------------ gradient checks


def _tiny_setup(C: int = 8, seed: int = 0, **enc_kw):
    grid = BEVGrid(4, 4, cell=2.0)
    cfg = EncoderConfig(blocks=1, dim=C, dropout=0.0, **enc_kw)
    p = ParamStore(seed)
    init_encoder(p, grid, cfg)
    rng = np.random.default_rng(seed + 100)
    for name in p.names():
        if not name.endswith("ln.g"):
            p[name].data[...] += rng.normal(scale=0.1, size=p[name].shape)
    ctx = EncoderContext.build(grid, default_rig(), (6, 6), cfg)
    maps = Tensor(rng.normal(size=(4, C, 6, 6)))
    return grid, cfg, p, ctx, maps


def gradcheck_components(h: float = 1e-5, corrupt: float = 0.0, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per sublayer and for the whole objective."""
    rng = np.random.default_rng(seed)
    results = {}

    # deformable attention on one map
    p = ParamStore(seed)
    p.add("off.w", (6, 8))
    p.add("off.b", (8,), init=rng.normal(scale=0.3, size=8))
    p.add("attn.w", (6, 4))
    p.add("attn.b", (4,), init=rng.normal(size=4))
    p.add("map", (5, 7, 7), init=rng.normal(size=(5, 7, 7)))
    q = rng.normal(size=(10, 6))
    ref = rng.uniform(0.3, 5.7, size=(10, 2))
    r = rng.normal(size=(10, 5))
    results["deformable_attention"] = max(gradient_errors(
        lambda ps: ops.sum(deformable_attend(q, ps["map"], ref, ps["off.w"], ps["off.b"], ps["attn.w"], ps["attn.b"]) * r),
        p, h=h, corrupt=corrupt).values())

    # uncertainty heads through Monte-Carlo precision fusion
    p = ParamStore(seed + 1)
    for hd in ("mu", "lv"):
        p.add(f"{hd}.w1", (6, 6))
        p.add(f"{hd}.b1", (6,), init=rng.normal(scale=0.1, size=6))
        p.add(f"{hd}.w2", (6, 6))
        p.add(f"{hd}.b2", (6,), init=rng.normal(scale=0.5, size=6) - (2.0 if hd == "lv" else 0.0))
    f = rng.normal(size=(5, 3, 6))
    M = (rng.random((5, 3)) < 0.7).astype(float)
    M[:, 0] = 1.0
    r = rng.normal(size=(5, 6))
    from .encoder import FusionConfig, kl_regularizer

    def unc(ps):
        e = estimate_uncertainty(f, *(ps[f"{hd}.{k}"] for hd in ("mu", "lv") for k in ("w1", "b1", "w2", "b2")))
        fused, _ = mc_fuse(e, M, FusionConfig(), np.random.default_rng(seed + 7), samples=4)
        return ops.sum(fused * r) + ops.scale(kl_regularizer(e), 0.01)

    results["uncertainty_mc_fusion"] = max(gradient_errors(unc, p, h=h, corrupt=corrupt).values())

    # distance-gated temporal attention
    grid, cfg, p, ctx, maps = _tiny_setup(seed=seed)
    Qt = rng.normal(size=(16, 8))
    Qp = rng.normal(size=(16, 8))
    r = rng.normal(size=(16, 8))
    names = [n for n in p.names() if ".tsa." in n or n.endswith(".pos")]
    results["gating"] = max(gradient_errors(
        lambda ps: ops.sum(gated_temporal_attend(Tensor(Qt), Tensor(Qp), ctx, ps, "enc.block0") * r),
        p, h=h, names=names, corrupt=corrupt).values())

    # feed-forward
    names = [n for n in p.names() if ".ffn." in n]
    results["ffn"] = max(gradient_errors(
        lambda ps: ops.sum(ffn_forward(Tensor(Qt), ps, "enc.block0") * r), p, h=h, names=names,
        corrupt=corrupt).values())

    # decoder with focal loss
    from .decoder import init_decoder
    p = ParamStore(seed + 2)
    init_decoder(p, 8)
    Y = rng.integers(0, 6, size=(8, 8))
    results["decoder"] = max(gradient_errors(
        lambda ps: focal_loss(mask_head_decode(Tensor(Qt), ps, (4, 4), (8, 8)), Y), p, h=h,
        corrupt=corrupt).values())

    # full objective: encoder + decoder, focal + weighted KL, two frames
    grid, cfg, p, ctx, maps = _tiny_setup(seed=seed + 3)
    init_decoder(p, 8)
    Y = rng.integers(0, 6, size=(4, 4))

    def objective(ps):
        Q, kl, _ = encoder_forward([maps, maps], [(0, 0, 0), (0.4, 0.1, 0.05)], ctx, ps, cfg,
                                   np.random.default_rng(seed + 9), detach_history=False)
        return total_loss(focal_loss(mask_head_decode(Q, ps, (4, 4)), Y), kl, 0.01)

    results["objective"] = max(gradient_errors(objective, p, h=h, coords_per_param=3, corrupt=corrupt).values())
    return results
