"""Fisheye camera model: quartic distortion polynomial, projection, BEV lifting.

Frames: the ego frame has x forward, y left, z up (metres). Camera frames
have z along the optical axis, x right, y down. Pixel coordinates are
(u, v) = (column, row) with pixel centres on integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DistortionPoly:
    """r(theta) = a1 theta + a2 theta^2 + a3 theta^3 + a4 theta^4, in pixels."""

    a1: float
    a2: float = 0.0
    a3: float = 0.0
    a4: float = 0.0
    theta_max: float = math.radians(95.0)

    def __post_init__(self):
        if self.theta_max <= 0:
            raise GeometryError("theta_max must be positive")
        grid = np.linspace(0.0, self.theta_max, 4001)
        if np.any(self.slope(grid) <= 0):
            raise GeometryError(f"r(theta) is not strictly increasing on [0, {self.theta_max:.4f}]")

    @property
    def coeffs(self) -> tuple[float, float, float, float]:
        return (self.a1, self.a2, self.a3, self.a4)

    def eval(self, theta):
        """Polynomial value without the domain check."""
        t = np.asarray(theta, dtype=np.float64)
        return t * (self.a1 + t * (self.a2 + t * (self.a3 + t * self.a4)))

    def slope(self, theta):
        t = np.asarray(theta, dtype=np.float64)
        return self.a1 + t * (2 * self.a2 + t * (3 * self.a3 + t * 4 * self.a4))

    @property
    def r_max(self) -> float:
        return float(self.eval(self.theta_max))


def theta_to_radius(poly: DistortionPoly, theta):
    t = np.asarray(theta, dtype=np.float64)
    if np.any(t < 0) or np.any(t > poly.theta_max):
        raise GeometryError(f"theta outside [0, {poly.theta_max}]")
    r = poly.eval(t)
    return float(r) if r.ndim == 0 else r


def radius_to_theta(poly: DistortionPoly, r, tol: float = 1e-12):
    """Invert the distortion polynomial by bisection on [0, theta_max]."""
    r = np.asarray(r, dtype=np.float64)
    r_max = poly.r_max
    if np.any(r < 0) or np.any(r > r_max * (1 + 1e-15)):
        raise GeometryError(f"radius beyond the image circle ({r_max:.6g} px)")
    lo = np.zeros_like(r)
    hi = np.full_like(r, poly.theta_max)
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rm = poly.eval(mid)
        if np.all(np.abs(rm - r) < tol):
            break
        below = rm < r
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= np.spacing(hi)):
            break
    mid = np.where(r == 0, 0.0, mid)
    return float(mid) if mid.ndim == 0 else mid


@dataclass(frozen=True)
class CameraIntrinsics:
    poly: DistortionPoly
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise GeometryError("principal point outside the image")


def rotation_from_ypr(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """World->camera rotation for a camera looking along (yaw, pitch) in the ego frame.

    Pitch is negative when the camera looks down. Rows are the camera x
    (right), y (down), z (forward) axes expressed in ego coordinates.
    """
    cp, sp_ = math.cos(pitch), math.sin(pitch)
    cyaw, syaw = math.cos(yaw), math.sin(yaw)
    z = np.array([cp * cyaw, cp * syaw, sp_])
    x = np.array([syaw, -cyaw, 0.0])  # z x up, normalized
    y = np.cross(z, x)
    if roll:
        cr, sr = math.cos(roll), math.sin(roll)
        x, y = cr * x + sr * y, -sr * x + cr * y
    return np.stack([x, y, z])


@dataclass(frozen=True)
class CameraExtrinsics:
    """X_cam = rotation @ X_ego + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise GeometryError("rotation must be 3x3")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_pose(cls, position, yaw_deg: float, pitch_deg: float, roll_deg: float = 0.0):
        R = rotation_from_ypr(math.radians(yaw_deg), math.radians(pitch_deg), math.radians(roll_deg))
        return cls(R, -R @ np.asarray(position, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Camera:
    name: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    # kept for the rig text format; the rotation is authoritative
    ypr_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise GeometryError("a rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]


DESK_POLY = (22.0, -1.5, 0.0, 0.0)
FULL_POLY = (220.0, -15.0, 0.0, 0.0)


def default_rig(height: int = 64, width: int = 64, coeffs=None, theta_max_deg: float = 95.0,
                box=(4.0, 2.0), mount_height: float = 1.0, pitch_deg: float = -30.0) -> CameraRig:
    """Four cameras at the side midpoints of the ego box, yaw 0/90/180/270 degrees."""
    if coeffs is None:
        coeffs = DESK_POLY if max(height, width) <= 128 else FULL_POLY
    poly = DistortionPoly(*coeffs, theta_max=math.radians(theta_max_deg))
    intr = CameraIntrinsics(poly, (width - 1) / 2, (height - 1) / 2, height, width)
    L, Wd = box
    mounts = [("front", (L / 2, 0.0), 0.0), ("left", (0.0, Wd / 2), 90.0),
              ("rear", (-L / 2, 0.0), 180.0), ("right", (0.0, -Wd / 2), 270.0)]
    cams = []
    for name, (x, y), yaw in mounts:
        ext = CameraExtrinsics.from_pose((x, y, mount_height), yaw, pitch_deg)
        cams.append(Camera(name, intr, ext, (yaw, pitch_deg, 0.0)))
    return CameraRig(tuple(cams))


# ---------------------------------------------------------------- projection


def project_points(cam: Camera, X) -> tuple[np.ndarray, np.ndarray]:
    """Project ego-frame points [..., 3] to pixels [..., 2] plus visibility."""
    X = np.asarray(X, dtype=np.float64)
    intr = cam.intrinsics
    Xc = X @ cam.extrinsics.rotation.T + cam.extrinsics.translation
    rho = np.hypot(Xc[..., 0], Xc[..., 1])
    theta = np.arctan2(rho, Xc[..., 2])
    r = intr.poly.eval(np.minimum(theta, intr.poly.theta_max))
    with np.errstate(invalid="ignore", divide="ignore"):
        dx = np.where(rho > 0, Xc[..., 0] / np.where(rho > 0, rho, 1), 0.0)
        dy = np.where(rho > 0, Xc[..., 1] / np.where(rho > 0, rho, 1), 0.0)
    u = intr.cx + r * dx
    v = intr.cy + r * dy
    at_center = np.linalg.norm(Xc, axis=-1) < 1e-12
    visible = ((theta <= intr.poly.theta_max) & ~at_center
               & (u >= -0.5) & (u < intr.width - 0.5) & (v >= -0.5) & (v < intr.height - 0.5))
    return np.stack([u, v], axis=-1), visible


def project_point(cam: Camera, X) -> tuple[float, float, bool]:
    uv, vis = project_points(cam, np.asarray(X, dtype=np.float64)[None])
    return float(uv[0, 0]), float(uv[0, 1]), bool(vis[0])


def pixel_rays(intr: CameraIntrinsics, uv) -> tuple[np.ndarray, np.ndarray]:
    """Unit camera-frame rays for pixels [..., 2]; second output marks pixels inside the image circle."""
    uv = np.asarray(uv, dtype=np.float64)
    du = uv[..., 0] - intr.cx
    dv = uv[..., 1] - intr.cy
    r = np.hypot(du, dv)
    inside = r <= intr.poly.r_max
    theta = radius_to_theta(intr.poly, np.minimum(r, intr.poly.r_max))
    theta = np.asarray(theta)
    safe = np.where(r > 0, r, 1.0)
    s = np.sin(theta)
    rays = np.stack([s * du / safe, s * dv / safe, np.cos(theta)], axis=-1)
    return rays, inside


def unproject(cam: Camera, uv) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ego-frame ray origin [3], unit directions [..., 3], and in-circle mask."""
    rays, inside = pixel_rays(cam.intrinsics, uv)
    dirs = rays @ cam.extrinsics.rotation
    return cam.extrinsics.center, dirs, inside


# ---------------------------------------------------------------- BEV grid


@dataclass(frozen=True)
class BEVGrid:
    """H x W cells; u is the column (ego +y to the left of u=0), v the row (ego +x at the top)."""

    height: int = 32
    width: int = 32
    cell: float = 0.5
    z_anchors: tuple[float, ...] = (0.0, 0.5)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.width - 1) / 2, (self.height - 1) / 2)

    @property
    def radius(self) -> float:
        return self.width / 2

    @property
    def num_queries(self) -> int:
        return self.height * self.width

    def positions(self) -> np.ndarray:
        """Cell coordinates (u, v) of every query in row-major order, [N_q, 2]."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)

    def cell_to_ego(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        ou, ov = self.center
        return np.stack([(ov - uv[..., 1]) * self.cell, (ou - uv[..., 0]) * self.cell], axis=-1)

    def ego_to_cell(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        ou, ov = self.center
        return np.stack([ou - xy[..., 1] / self.cell, ov - xy[..., 0] / self.cell], axis=-1)


@dataclass
class ReferencePoints:
    uv: np.ndarray          # [N_q, N_c, N_a, 2] image pixels
    anchor_visible: np.ndarray  # [N_q, N_c, N_a]
    mask: np.ndarray        # [N_q, N_c], 1 where any anchor is visible
    extra: dict = field(default_factory=dict)


def bev_reference_points(grid: BEVGrid, rig: CameraRig) -> ReferencePoints:
    """Lift every cell centre to each z anchor and project into every camera."""
    xy = grid.cell_to_ego(grid.positions())
    n_a = len(grid.z_anchors)
    pts = np.concatenate([np.repeat(xy[:, None, :], n_a, axis=1),
                          np.broadcast_to(np.asarray(grid.z_anchors)[None, :, None], (len(xy), n_a, 1))], axis=-1)
    uvs, vis = [], []
    for cam in rig:
        uv, v = project_points(cam, pts)
        uvs.append(uv)
        vis.append(v)
    uv = np.stack(uvs, axis=1)
    anchor_visible = np.stack(vis, axis=1)
    return ReferencePoints(uv, anchor_visible, anchor_visible.any(axis=-1).astype(np.float64))


# ---------------------------------------------------------------- diagnostics


def anisotropy_at(intr: CameraIntrinsics, uv, step: float = 0.5) -> np.ndarray:
    """log10 of the singular-value ratio of d(ray direction)/d(pixel) at pixels [..., 2].

    Central differences with ``step`` pixels; points whose stencil leaves the
    image circle give NaN.
    """
    uv = np.asarray(uv, dtype=np.float64)
    r = np.hypot(uv[..., 0] - intr.cx, uv[..., 1] - intr.cy)
    ok = r + step <= intr.poly.r_max
    p = uv[ok]

    def rays(du, dv):
        return pixel_rays(intr, p + np.array([du, dv]))[0]

    J = np.stack([(rays(step, 0) - rays(-step, 0)) / (2 * step),
                  (rays(0, step) - rays(0, -step)) / (2 * step)], axis=-1)  # [n, 3, 2]
    s = np.linalg.svd(J, compute_uv=False)
    out = np.full(uv.shape[:-1], np.nan)
    out[ok] = np.log10(s[:, 0] / s[:, 1])
    return out


def anisotropy_heatmap(intr: CameraIntrinsics, step: float = 0.5) -> np.ndarray:
    """Per-pixel anisotropy, [H_img, W_img]; NaN outside the image circle."""
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    return anisotropy_at(intr, np.stack([u, v], axis=-1), step)


# ---------------------------------------------------------------- rig files


_RIG_KEYS = ("a1", "a2", "a3", "a4", "theta_max_deg", "cx", "cy", "H", "W",
             "yaw", "pitch", "roll", "x", "y", "z")


def format_rig(rig: CameraRig) -> str:
    """Text form: a ``camera = name`` line opens each block of key = value lines.

    yaw/pitch/roll are degrees; x/y/z is the camera centre in the ego frame (m).
    """
    lines = ["# fisheye rig"]
    for cam in rig:
        i = cam.intrinsics
        c = cam.extrinsics.center
        vals = dict(zip(("a1", "a2", "a3", "a4"), i.poly.coeffs))
        vals.update(theta_max_deg=math.degrees(i.poly.theta_max), cx=i.cx, cy=i.cy, H=i.height, W=i.width,
                    yaw=cam.ypr_deg[0], pitch=cam.ypr_deg[1], roll=cam.ypr_deg[2], x=c[0], y=c[1], z=c[2])
        lines.append(f"camera = {cam.name}")
        for k in _RIG_KEYS:
            val = vals[k]
            lines.append(f"{k} = {int(val)}" if k in ("H", "W") else f"{k} = {float(val)!r}")
    return "\n".join(lines) + "\n"


def parse_rig(text: str, source: str = "<rig>") -> CameraRig:
    blocks: list[tuple[str, dict]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GeometryError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "camera":
            blocks.append((val, {}))
            continue
        if not blocks:
            raise GeometryError(f"{source}:{lineno}: '{key}' before any camera line")
        if key not in _RIG_KEYS:
            raise GeometryError(f"{source}:{lineno}: unknown key '{key}'")
        blocks[-1][1][key] = float(val)
    cams = []
    for name, kv in blocks:
        missing = [k for k in _RIG_KEYS if k not in kv]
        if missing:
            raise GeometryError(f"{source}: camera {name} missing {', '.join(missing)}")
        poly = DistortionPoly(kv["a1"], kv["a2"], kv["a3"], kv["a4"], math.radians(kv["theta_max_deg"]))
        intr = CameraIntrinsics(poly, kv["cx"], kv["cy"], int(kv["H"]), int(kv["W"]))
        ypr = (kv["yaw"], kv["pitch"], kv["roll"])
        ext = CameraExtrinsics.from_pose((kv["x"], kv["y"], kv["z"]), *ypr)
        cams.append(Camera(name, intr, ext, ypr))
    return CameraRig(tuple(cams))


def write_rig(path, rig: CameraRig) -> None:
    Path(path).write_text(format_rig(rig))


def read_rig(path) -> CameraRig:
    return parse_rig(Path(path).read_text(), str(path))
