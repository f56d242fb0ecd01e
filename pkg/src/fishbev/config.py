"""Run configuration: flat ``section.key = value`` settings with typed defaults.

Two profiles exist. ``desk`` is small enough for a laptop CPU; ``full``
carries the large-scale settings (image size, grid, width, schedule).
"""

from __future__ import annotations

from pathlib import Path

DESK: dict[str, object] = {
    "run.seed": 0,
    "data.train_scenes": 40,
    "data.eval_scenes": 20,
    "data.frames": 3,
    "data.scene_extent": 48.0,
    "image.height": 64,
    "image.width": 64,
    "rig.a1": 22.0,
    "rig.a2": -1.5,
    "rig.a3": 0.0,
    "rig.a4": 0.0,
    "rig.theta_max_deg": 95.0,
    "rig.pitch_deg": -30.0,
    "rig.mount_height": 1.0,
    "grid.height": 32,
    "grid.width": 32,
    "grid.cell": 0.5,
    "drme.patch": 8,
    "drme.dim": 32,
    "drme.layers": 4,
    "encoder.blocks": 2,
    "encoder.dim": 64,
    "encoder.dropout": 0.0,
    "encoder.uncertainty_fusion": "on",
    "encoder.distance_gating": "on",
    "fusion.points": 4,
    "fusion.mc_samples": 4,
    "fusion.mc_samples_diag": 32,
    "fusion.xi": 1e-6,
    "fusion.log_var_prior": -4.0,
    "fusion.kl_weight": 0.01,
    "gating.kappa": 10.0,
    "gating.delta": 0.8,
    "focal.alpha": 0.25,
    "focal.gamma": 2.0,
    "optim.lr": 2e-3,
    "optim.weight_decay": 0.01,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.lr_decay": 0.99,
    "train.steps": 300,
    "train.batch": 1,
    "train.epochs": 0,       # 0: stop on train.steps instead
    "train.log_every": 1,
}

FULL: dict[str, object] = dict(DESK)
FULL.update({
    "image.height": 540,
    "image.width": 640,
    "rig.a1": 220.0,
    "rig.a2": -15.0,
    "grid.height": 50,
    "grid.width": 50,
    "grid.cell": 0.4,
    "drme.patch": 20,
    "drme.dim": 256,
    "encoder.dim": 256,
    "encoder.dropout": 0.1,
    "optim.lr": 3e-5,
    "train.batch": 2,
    "train.epochs": 50,
    "train.steps": 0,
})

PROFILES = {"desk": DESK, "full": FULL}


class ConfigError(ValueError):
    pass


def _cast(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return raw


class RunConfig:
    """Typed key/value settings for one profile; unknown keys are rejected."""

    def __init__(self, profile: str = "desk", values: dict | None = None):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r} (expected desk|full)")
        self.profile = profile
        self.values = dict(PROFILES[profile])
        for k, v in (values or {}).items():
            self.set(k, v)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        default = PROFILES[self.profile][key]
        self.values[key] = _cast(key, value, default) if isinstance(value, str) else type(default)(value)

    def section(self, name: str) -> dict:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def override(self, assignments) -> "RunConfig":
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            self.set(k.strip(), v.strip())
        return self

    def format(self) -> str:
        lines = [f"profile = {self.profile}"]
        lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def copy(self) -> "RunConfig":
        c = RunConfig(self.profile)
        c.values = dict(self.values)
        return c


def parse_config(text: str, profile: str | None = None, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines; ``profile = ...`` picks the defaults."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in body.split("=", 1))
        entries.append((lineno, k, v))
    for _, k, v in entries:
        if k == "profile" and profile is None:
            profile = v
    cfg = RunConfig(profile or "desk")
    for lineno, k, v in entries:
        if k == "profile":
            continue
        try:
            cfg.set(k, v)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load_config(path, profile: str | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), profile, str(path))
