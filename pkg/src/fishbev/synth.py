"""Procedural ground-plane scenes, fisheye rendering and BEV ground truth.

A scene is a metric class map in world coordinates plus an ego trajectory.
The ego footprint is overlaid analytically at whichever pose is being looked
at, so it moves with the vehicle. Rendering casts each pixel's ray onto the
ground plane z = 0 and writes the palette colour of the class found there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import NUM_CLASSES
from .geometry import BEVGrid, Camera, CameraRig, pixel_rays

VOID, ROAD, SIDEWALK, VEGETATION, VEHICLE, EGO = range(6)

# 8-bit palette shared by renders and PPM exports
PALETTE = np.array([
    [0, 0, 0],        # void
    [128, 64, 128],   # road
    [244, 35, 232],   # sidewalk
    [107, 142, 35],   # vegetation
    [0, 0, 142],      # vehicle
    [255, 255, 0],    # ego
], dtype=np.uint8)
assert len(PALETTE) == NUM_CLASSES


@dataclass(frozen=True)
class SceneParams:
    extent: float = 48.0          # metres, square map centred on the start pose
    resolution: float = 0.1       # metres per map cell
    frames: int = 3
    road_width: tuple[float, float] = (5.0, 7.0)
    sidewalk_width: tuple[float, float] = (1.0, 2.0)
    vehicles: tuple[int, int] = (4, 9)
    vegetation: tuple[int, int] = (10, 18)
    speed: tuple[float, float] = (0.5, 1.5)   # metres per frame
    yaw_rate: float = 0.08                     # max radians per frame on arcs
    ego_box: tuple[float, float] = (4.0, 2.0)  # length (x), width (y)
    cross_road_prob: float = 0.3


@dataclass
class SyntheticScene:
    base: np.ndarray            # int8 [Nx, Ny], indexed [ix, iy]
    resolution: float
    origin: tuple[float, float]  # world (x, y) of the map corner
    poses: np.ndarray           # [T, 3] world (x, y, yaw)
    seed: int
    ego_box: tuple[float, float] = (4.0, 2.0)
    vehicle_boxes: list = field(default_factory=list)

    def class_at(self, xy, pose=None) -> np.ndarray:
        """Nearest-cell class at world points [..., 2]; the ego box of ``pose`` wins."""
        xy = np.asarray(xy, dtype=np.float64)
        ix = np.floor((xy[..., 0] - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((xy[..., 1] - self.origin[1]) / self.resolution).astype(np.int64)
        nx, ny = self.base.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.where(ok, self.base[np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1)], VOID).astype(np.int64)
        if pose is not None:
            out[in_box(xy, pose, self.ego_box)] = EGO
        return out


def in_box(xy, pose, box, margin: float = 0.0) -> np.ndarray:
    """Points [..., 2] inside a box of (length, width) centred at pose (x, y, yaw)."""
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = xy[..., 0] - x, xy[..., 1] - y
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box[0] / 2 + margin) & (np.abs(ly) <= box[1] / 2 + margin)


def boxes_overlap(p1, b1, p2, b2) -> bool:
    """Separating-axis test for two oriented rectangles."""
    def corners(p, b):
        x, y, yaw = p
        c, s = math.cos(yaw), math.sin(yaw)
        hx, hy = b[0] / 2, b[1] / 2
        return np.array([[x + c * ex - s * ey, y + s * ex + c * ey]
                         for ex, ey in ((hx, hy), (hx, -hy), (-hx, -hy), (-hx, hy))])

    A, B = corners(p1, b1), corners(p2, b2)
    for P in (A, B):
        for i in range(4):
            edge = P[(i + 1) % 4] - P[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = A @ axis, B @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def trajectory(rng: np.random.Generator, params: SceneParams) -> np.ndarray:
    v = rng.uniform(*params.speed)
    w = rng.uniform(-params.yaw_rate, params.yaw_rate) if rng.random() < 0.5 else 0.0
    poses = [(0.0, 0.0, 0.0)]
    for _ in range(params.frames - 1):
        x, y, yaw = poses[-1]
        mid = yaw + w / 2
        poses.append((x + v * math.cos(mid), y + v * math.sin(mid), yaw + w))
    return np.array(poses)


def generate_scene(seed: int, params: SceneParams = SceneParams()) -> SyntheticScene:
    if params.extent <= 0 or params.resolution <= 0 or params.frames < 1:
        raise ValueError("scene extent, resolution and frame count must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(params.extent / params.resolution))
    half = params.extent / 2
    origin = (-half, -half)
    cells = -half + (np.arange(n) + 0.5) * params.resolution
    X, Y = np.meshgrid(cells, cells, indexing="ij")
    base = np.zeros((n, n), dtype=np.int8)

    poses = trajectory(rng, params)

    # main road along x through the start pose, optional crossing road along y
    roads = [(0, rng.uniform(-1.0, 1.0), rng.uniform(*params.road_width), rng.uniform(*params.sidewalk_width))]
    if rng.random() < params.cross_road_prob:
        roads.append((1, rng.uniform(-half / 2, half / 2), rng.uniform(*params.road_width),
                      rng.uniform(*params.sidewalk_width)))
    coord = (Y, X)
    for axis, centre, width, walk in roads:
        d = np.abs(coord[axis] - centre)
        base[(d <= width / 2 + walk) & (base != ROAD)] = SIDEWALK
    for axis, centre, width, walk in roads:
        base[np.abs(coord[axis] - centre) <= width / 2] = ROAD

    # vegetation patches, mostly in a band beside the main road
    _, centre, width, walk = roads[0]
    for _ in range(rng.integers(params.vegetation[0], params.vegetation[1] + 1)):
        side = 1.0 if rng.random() < 0.5 else -1.0
        cx = rng.uniform(-half / 2, half / 2)
        cy = centre + side * (width / 2 + walk + rng.uniform(0.5, 6.0))
        r = rng.uniform(1.0, 3.0)
        blob = ((X - cx) ** 2 + (Y - cy) ** 2 <= r * r) & (base == VOID)
        base[blob] = VEGETATION

    # vehicles on the main road, never touching the ego at any pose
    axis, centre, width, _ = roads[0]
    boxes = []
    target = rng.integers(params.vehicles[0], params.vehicles[1] + 1)
    tries = 0
    while len(boxes) < target and tries < 200:
        tries += 1
        box = (rng.uniform(3.8, 4.8), rng.uniform(1.6, 2.0))
        pose = (rng.uniform(-half / 1.5, half / 1.5),
                centre + rng.uniform(-width / 2 + box[1] / 2, width / 2 - box[1] / 2),
                rng.normal(scale=0.1) + (math.pi if rng.random() < 0.5 else 0.0))
        inflated = (params.ego_box[0] + 1.0, params.ego_box[1] + 1.0)
        if any(boxes_overlap(pose, box, tuple(p), inflated) for p in poses):
            continue
        if any(boxes_overlap(pose, box, q, b) for q, b in boxes):
            continue
        boxes.append((pose, box))
        base[in_box(np.stack([X, Y], axis=-1), pose, box)] = VEHICLE

    return SyntheticScene(base, params.resolution, origin, poses, int(seed), params.ego_box, boxes)


# ------------------------------------------------------------ pose helpers


def ego_to_world(xy, pose) -> np.ndarray:
    x, y, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([x + c * xy[..., 0] - s * xy[..., 1], y + s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def pose_delta(prev, cur) -> tuple[float, float, float]:
    """Current pose expressed in the previous ego frame."""
    dx, dy = cur[0] - prev[0], cur[1] - prev[1]
    c, s = math.cos(prev[2]), math.sin(prev[2])
    return (c * dx + s * dy, -s * dx + c * dy, cur[2] - prev[2])


# ------------------------------------------------------------ rendering


def ground_hits(cam: Camera, pose, uv) -> tuple[np.ndarray, np.ndarray]:
    """World ground-plane intersections of pixel rays -> (xy [..., 2], valid)."""
    rays, inside = pixel_rays(cam.intrinsics, uv)
    R = cam.extrinsics.rotation
    C = cam.extrinsics.center
    d = rays @ R  # camera -> ego: R^T d
    down = d[..., 2] < -1e-12
    s = np.where(down, -C[2] / np.where(down, d[..., 2], -1.0), 0.0)
    hit = C[:2] + s[..., None] * d[..., :2]
    return ego_to_world(hit, pose), inside & down


def pixel_grid(height: int, width: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def render_classes(scene: SyntheticScene, cam: Camera, pose) -> np.ndarray:
    """Per-pixel class map [H, W]; rays that miss the ground are void."""
    uv = pixel_grid(cam.intrinsics.height, cam.intrinsics.width)
    xy, ok = ground_hits(cam, pose, uv)
    cls = scene.class_at(xy, pose)
    return np.where(ok, cls, VOID)


def render_rig(scene: SyntheticScene, rig: CameraRig, pose) -> np.ndarray:
    """[N_c, 3, H, W] real32 images in [0, 1]."""
    imgs = []
    for cam in rig:
        cls = render_classes(scene, cam, pose)
        imgs.append((PALETTE[cls].astype(np.float32) / 255.0).transpose(2, 0, 1))
    return np.stack(imgs)


def decode_classes(image) -> np.ndarray:
    """Nearest palette entry per pixel of a [3, H, W] image in [0, 1]."""
    rgb = np.asarray(image, dtype=np.float64).transpose(1, 2, 0) * 255.0
    d = ((rgb[..., None, :] - PALETTE[None, None].astype(np.float64)) ** 2).sum(axis=-1)
    return d.argmin(axis=-1)


def bev_ground_truth(scene: SyntheticScene, pose, grid: BEVGrid, overlay: bool = True) -> np.ndarray:
    """Nearest-cell scene lookup at every BEV cell centre -> int [H_bev, W_bev]."""
    xy = ego_to_world(grid.cell_to_ego(grid.positions()), pose)
    cls = scene.class_at(xy, pose if overlay else None)
    return cls.reshape(grid.height, grid.width)


def class_histogram(maps) -> np.ndarray:
    return np.bincount(np.asarray(maps, dtype=np.int64).reshape(-1), minlength=NUM_CLASSES)
