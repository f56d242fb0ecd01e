"""On-disk layout for synthetic sequences.

    root/manifest.txt              key = value lines
    root/rig.txt                   camera rig used for rendering
    root/scene_XXXX/frame_YY/cam_{0..3}.fbt   [3, H, W] real32 images
    root/scene_XXXX/frame_YY/bev_gt.fbt       [H_bev, W_bev] real32 class ids
    root/scene_XXXX/frame_YY/pose.txt         "x y yaw" absolute world pose
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import NUM_CLASSES
from .geometry import BEVGrid, CameraRig, read_rig, write_rig
from .synth import SceneParams, bev_ground_truth, generate_scene, pose_delta, render_rig
from .tensor_core import read_fbt, write_fbt


class DatasetError(ValueError):
    def __init__(self, path, reason: str, offset: int | None = None):
        self.path = str(path)
        self.offset = offset
        where = f"{path}: byte {offset}: " if offset is not None else f"{path}: "
        super().__init__(where + reason)


@dataclass
class SceneSample:
    images: np.ndarray       # [N_c, 3, H, W] real32
    bev_gt: np.ndarray       # [H_bev, W_bev] int64
    pose: tuple[float, float, float]
    delta: tuple[float, float, float] = (0.0, 0.0, 0.0)


def format_pose(pose) -> str:
    return " ".join(repr(float(v)) for v in pose) + "\n"


def parse_pose(text: str, path="<pose>") -> tuple[float, float, float]:
    parts = text.split()
    if len(parts) != 3:
        raise DatasetError(path, f"expected 'x y yaw', found {len(parts)} fields", 0)
    out = []
    offset = 0
    for tok in parts:
        offset = text.index(tok, offset)
        try:
            out.append(float(tok))
        except ValueError:
            raise DatasetError(path, f"not a number: {tok!r}", offset) from None
        offset += len(tok)
    return tuple(out)


def frame_dir(root, scene: int, frame: int) -> Path:
    return Path(root) / f"scene_{scene:04d}" / f"frame_{frame:02d}"


def write_frame(directory, sample: SceneSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c, img in enumerate(sample.images):
        write_fbt(d / f"cam_{c}.fbt", np.asarray(img, dtype=np.float32))
    write_fbt(d / "bev_gt.fbt", np.asarray(sample.bev_gt, dtype=np.float32))
    (d / "pose.txt").write_text(format_pose(sample.pose))


def read_frame(directory, num_cameras: int = 4) -> SceneSample:
    d = Path(directory)
    imgs = []
    for c in range(num_cameras):
        path = d / f"cam_{c}.fbt"
        if not path.exists():
            raise DatasetError(path, f"missing camera file cam_{c}.fbt")
        imgs.append(read_fbt(path))
    gt_path = d / "bev_gt.fbt"
    if not gt_path.exists():
        raise DatasetError(gt_path, "missing ground truth bev_gt.fbt")
    gt = read_fbt(gt_path)
    if gt.ndim != 2 or np.any(gt != np.round(gt)) or gt.min() < 0 or gt.max() >= NUM_CLASSES:
        raise DatasetError(gt_path, "ground truth must be a 2-D map of class ids", 0)
    pose_path = d / "pose.txt"
    if not pose_path.exists():
        raise DatasetError(pose_path, "missing pose.txt")
    pose = parse_pose(pose_path.read_text(), pose_path)
    return SceneSample(np.stack(imgs), gt.astype(np.int64), pose)


def write_scene(directory, samples: list[SceneSample]) -> None:
    for t, s in enumerate(samples):
        write_frame(Path(directory) / f"frame_{t:02d}", s)


def read_scene(directory, num_cameras: int = 4) -> list[SceneSample]:
    d = Path(directory)
    frames = sorted(p for p in d.glob("frame_*") if p.is_dir())
    if not frames:
        raise DatasetError(d, "scene has no frame directories")
    out = []
    for t, fd in enumerate(frames):
        s = read_frame(fd, num_cameras)
        if t > 0:
            s.delta = pose_delta(out[-1].pose, s.pose)
        out.append(s)
    return out


# ------------------------------------------------------------ manifest


def write_manifest(root, info: dict) -> None:
    lines = [f"{k} = {v}" for k, v in info.items()]
    (Path(root) / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DatasetError(path, "missing manifest.txt")
    info = {}
    offset = 0
    for line in path.read_text().splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise DatasetError(path, f"expected 'key = value', got {body!r}", offset)
            k, v = body.split("=", 1)
            info[k.strip()] = v.strip()
        offset += len(line.encode())
    return info


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_scene_samples(seed: int, rig: CameraRig, grid: BEVGrid, params: SceneParams) -> list[SceneSample]:
    scene = generate_scene(seed, params)
    out = []
    for t, pose in enumerate(scene.poses):
        pose = tuple(float(v) for v in pose)
        delta = pose_delta(out[-1].pose, pose) if t else (0.0, 0.0, 0.0)
        out.append(SceneSample(render_rig(scene, rig, pose), bev_ground_truth(scene, pose, grid), pose, delta))
    return out


def synthesize(root, num_scenes: int, seed: int, rig: CameraRig, grid: BEVGrid,
               params: SceneParams = SceneParams(), first_index: int = 0) -> np.ndarray:
    """Render ``num_scenes`` sequences under ``root``; returns the BEV class histogram."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_rig(root / "rig.txt", rig)
    hist = np.zeros(NUM_CLASSES, dtype=np.int64)
    seeds = []
    for i in range(num_scenes):
        s = scene_seed(seed, first_index + i)
        seeds.append(s)
        samples = make_scene_samples(s, rig, grid, params)
        write_scene(root / f"scene_{i:04d}", samples)
        for smp in samples:
            hist += np.bincount(smp.bev_gt.reshape(-1), minlength=NUM_CLASSES)
    write_manifest(root, {
        "scenes": num_scenes,
        "frames": params.frames,
        "rig": "rig.txt",
        "seed": seed,
        "first_index": first_index,
        "bev": f"{grid.height} {grid.width} {grid.cell!r}",
        "scene_seeds": " ".join(str(s) for s in seeds),
    })
    return hist


class Dataset:
    """Lazy reader over a synthesized directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.info = read_manifest(self.root)
        try:
            self.num_scenes = int(self.info.get("scenes", "0"))
        except ValueError:
            raise DatasetError(self.root / "manifest.txt", "scenes is not an integer") from None
        self.rig = read_rig(self.root / self.info.get("rig", "rig.txt"))
        self._cache: dict[int, list[SceneSample]] = {}

    def __len__(self) -> int:
        return self.num_scenes

    def __getitem__(self, i: int) -> list[SceneSample]:
        if not 0 <= i < self.num_scenes:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = read_scene(self.root / f"scene_{i:04d}", len(self.rig))
        return self._cache[i]
