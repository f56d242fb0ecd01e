"""The full network: shared image extractor, BEV encoder and mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .decoder import FocalConfig, focal_loss, init_decoder, mask_head_decode, total_loss
from .drme import PatchEmbedConfig, drme_forward, init_drme
from .encoder import (
    EncoderConfig,
    EncoderContext,
    FusionConfig,
    GatingConfig,
    encoder_forward,
    init_encoder,
)
from .geometry import BEVGrid, CameraRig, default_rig
from .synth import SceneParams
from .tensor_core import ParamStore, Tensor, no_tape


@dataclass
class ModelSpec:
    grid: BEVGrid
    drme: PatchEmbedConfig
    encoder: EncoderConfig
    focal: FocalConfig

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ModelSpec":
        grid = BEVGrid(cfg["grid.height"], cfg["grid.width"], cfg["grid.cell"])
        fusion = FusionConfig(points=cfg["fusion.points"], mc_samples=cfg["fusion.mc_samples"],
                              mc_samples_diag=cfg["fusion.mc_samples_diag"], xi=cfg["fusion.xi"],
                              log_var_prior=cfg["fusion.log_var_prior"], kl_weight=cfg["fusion.kl_weight"])
        enc = EncoderConfig(blocks=cfg["encoder.blocks"], dim=cfg["encoder.dim"], dropout=cfg["encoder.dropout"],
                            uncertainty_fusion=cfg["encoder.uncertainty_fusion"],
                            distance_gating=cfg["encoder.distance_gating"],
                            gating=GatingConfig(cfg["gating.kappa"], cfg["gating.delta"]), fusion=fusion)
        drme = PatchEmbedConfig(patch=cfg["drme.patch"], dim=cfg["drme.dim"], layers=cfg["drme.layers"],
                                out_channels=cfg["encoder.dim"])
        return cls(grid, drme, enc, FocalConfig(cfg["focal.alpha"], cfg["focal.gamma"]))


def rig_from_config(cfg: RunConfig) -> CameraRig:
    return default_rig(cfg["image.height"], cfg["image.width"],
                       (cfg["rig.a1"], cfg["rig.a2"], cfg["rig.a3"], cfg["rig.a4"]),
                       cfg["rig.theta_max_deg"], mount_height=cfg["rig.mount_height"], pitch_deg=cfg["rig.pitch_deg"])


def scene_params_from_config(cfg: RunConfig) -> SceneParams:
    return SceneParams(extent=cfg["data.scene_extent"], frames=cfg["data.frames"])


class FishBEVModel:
    def __init__(self, spec: ModelSpec, rig: CameraRig, seed: int = 0):
        self.spec = spec
        self.rig = rig
        self.params = ParamStore(seed)
        init_drme(self.params, spec.drme)
        init_encoder(self.params, spec.grid, spec.encoder)
        init_decoder(self.params, spec.encoder.dim)
        H, W = rig[0].intrinsics.height, rig[0].intrinsics.width
        h, w = H // spec.drme.patch, W // spec.drme.patch
        feat_hw = (max(1, round(h * spec.drme.scales[0])), max(1, round(w * spec.drme.scales[0])))
        self.ctx = EncoderContext.build(spec.grid, rig, feat_hw, spec.encoder)

    @classmethod
    def from_config(cls, cfg: RunConfig, rig: CameraRig | None = None) -> "FishBEVModel":
        return cls(ModelSpec.from_config(cfg), rig or rig_from_config(cfg), cfg["run.seed"])

    def features(self, images) -> Tensor:
        return drme_forward(np.asarray(images, dtype=np.float64), self.params, self.spec.drme)

    def forward(self, frames, rng: np.random.Generator, training: bool = False, samples: int | None = None):
        """frames: SceneSample sequence (oldest first) -> (logits [6, H, W], KL or None, conf list)."""
        maps = [(lambda f=f: self.features(f.images)) for f in frames]
        deltas = [f.delta for f in frames]
        Q, kl, confs = encoder_forward(maps, deltas, self.ctx, self.params, self.spec.encoder, rng,
                                       training=training, samples=samples)
        g = self.spec.grid
        logits = mask_head_decode(Q, self.params, (g.height, g.width))
        return logits, kl, confs

    def loss(self, frames, rng: np.random.Generator, training: bool = True):
        logits, kl, _ = self.forward(frames, rng, training)
        focal = focal_loss(logits, frames[-1].bev_gt, self.spec.focal)
        total = total_loss(focal, kl, self.spec.encoder.fusion.kl_weight)
        return total, focal, kl

    def predict(self, frames, rng: np.random.Generator, samples: int | None = None):
        with no_tape():
            logits, _, confs = self.forward(frames, rng, training=False, samples=samples)
        return logits.data.argmax(axis=0), confs
