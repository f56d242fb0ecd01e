import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fishbev.geometry import (
    BEVGrid,
    Camera,
    CameraExtrinsics,
    CameraIntrinsics,
    DistortionPoly,
    GeometryError,
    anisotropy_at,
    anisotropy_heatmap,
    bev_reference_points,
    default_rig,
    format_rig,
    parse_rig,
    project_point,
    project_points,
    radius_to_theta,
    theta_to_radius,
    unproject,
)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_theta_to_radius_examples():
    assert theta_to_radius(DistortionPoly(1.0), 0.5) == 0.5
    assert theta_to_radius(DistortionPoly(3.0, 0.2, 0.01, 0.001), 0.0) == 0.0
    assert theta_to_radius(DistortionPoly(1.0, 0.1), 1.0) == pytest.approx(1.1, abs=1e-15)
    with pytest.raises(GeometryError):
        theta_to_radius(DistortionPoly(1.0), 2.0)
    with pytest.raises(GeometryError):
        theta_to_radius(DistortionPoly(1.0), -0.1)


def test_radius_to_theta_examples():
    assert radius_to_theta(DistortionPoly(1.0), 0.0) == 0.0
    assert radius_to_theta(DistortionPoly(1.0), 0.7) == pytest.approx(0.7, abs=1e-12)
    poly = default_rig()[0].intrinsics.poly
    with pytest.raises(GeometryError):
        radius_to_theta(poly, poly.r_max + 0.1)


def test_round_trip_named_angles():
    poly = default_rig()[0].intrinsics.poly
    thetas = np.arange(1, 17) / 10.0
    back = radius_to_theta(poly, theta_to_radius(poly, thetas))
    assert np.max(np.abs(back - thetas)) < 1e-9


@pytest.mark.parametrize("profile", [(64, 64), (540, 640)])
def test_round_trip_dense(profile):
    poly = default_rig(*profile)[0].intrinsics.poly
    thetas = np.linspace(0, poly.theta_max, 1000)
    assert np.max(np.abs(radius_to_theta(poly, poly.eval(thetas)) - thetas)) < 1e-9


def test_non_monotone_poly_rejected():
    with pytest.raises(GeometryError):
        DistortionPoly(1.0, -1.0, theta_max=1.6)
    # default coefficients stay monotone up to 95 degrees
    DistortionPoly(220.0, -15.0, theta_max=1.658)
    DistortionPoly(22.0, -1.5, theta_max=1.658)


def test_principal_point_must_be_inside():
    with pytest.raises(GeometryError):
        CameraIntrinsics(DistortionPoly(10.0), 70.0, 3.0, 64, 64)


def test_extrinsics_validation():
    with pytest.raises(GeometryError):
        CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        CameraExtrinsics(np.eye(3) * 1.01, np.zeros(3))


def test_point_on_optical_axis_hits_principal_point():
    rig = default_rig()
    for cam in rig:
        axis = cam.extrinsics.rotation[2]
        u, v, vis = project_point(cam, cam.extrinsics.center + 3.0 * axis)
        assert vis
        assert u == pytest.approx(cam.intrinsics.cx, abs=1e-9)
        assert v == pytest.approx(cam.intrinsics.cy, abs=1e-9)


def test_field_of_view_cutoff():
    cam = default_rig()[0]
    R = cam.extrinsics.rotation
    # 100 degrees off-axis, toward the camera's right
    d = math.cos(math.radians(100)) * R[2] + math.sin(math.radians(100)) * R[0]
    _, _, vis = project_point(cam, cam.extrinsics.center + d)
    assert not vis
    d = math.cos(math.radians(60)) * R[2] + math.sin(math.radians(60)) * R[0]
    assert project_point(cam, cam.extrinsics.center + d)[2]
    _, _, vis = project_point(cam, cam.extrinsics.center)
    assert not vis


def test_unproject_reconstructs_ray():
    rng = np.random.default_rng(0)
    rig = default_rig()
    checked = 0
    for cam in rig:
        X = rng.uniform(-8, 8, size=(500, 3))
        X[:, 2] = rng.uniform(0, 1.5, size=500)
        uv, vis = project_points(cam, X)
        C, dirs, inside = unproject(cam, uv[vis])
        assert inside.all()
        rel = X[vis] - C
        along = np.sum(rel * dirs, axis=-1)
        assert np.all(along > 0)
        miss = np.linalg.norm(rel - along[:, None] * dirs, axis=-1)
        assert np.max(miss / np.linalg.norm(rel, axis=-1)) < 1e-9
        checked += vis.sum()
    assert checked > 500


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_rotation_consistent(seed):
    rng = np.random.default_rng(seed)
    cam = default_rig()[int(rng.integers(4))]
    G = random_rotation(rng)
    X = rng.uniform(-5, 5, size=(50, 3))
    ext = cam.extrinsics
    moved = Camera(cam.name, cam.intrinsics, CameraExtrinsics(ext.rotation @ G.T, ext.translation))
    assert np.allclose(moved.extrinsics.center, G @ ext.center, atol=1e-12)
    uv0, v0 = project_points(cam, X)
    uv1, v1 = project_points(moved, X @ G.T)
    np.testing.assert_array_equal(v0, v1)
    assert np.max(np.abs(uv0 - uv1)) < 1e-9


def test_visibility_monotone_in_fov():
    rng = np.random.default_rng(1)
    base = default_rig(theta_max_deg=80.0)
    wide = default_rig(theta_max_deg=95.0)
    X = rng.uniform(-10, 10, size=(5000, 3))
    for a, b in zip(base, wide):
        _, va = project_points(a, X)
        _, vb = project_points(b, X)
        assert not np.any(va & ~vb)
        assert vb.sum() > va.sum()


# ---------------------------------------------------------------- BEV lifting


def test_grid_constants():
    g = BEVGrid(50, 50)
    assert g.num_queries == 2500
    assert g.center == (24.5, 24.5)
    assert g.radius == 25.0
    uv = g.positions()
    np.testing.assert_allclose(g.ego_to_cell(g.cell_to_ego(uv)), uv, atol=1e-12)


def test_reference_points_shapes():
    rp = bev_reference_points(BEVGrid(50, 50, 0.4), default_rig())
    assert rp.uv.shape == (2500, 4, 2, 2)
    assert rp.mask.shape == (2500, 4)


def test_cell_below_front_camera_visible_in_front():
    g = BEVGrid()
    rig = default_rig()
    rp = bev_reference_points(g, rig)
    # cell containing the front-camera mount point (2 m ahead of centre)
    u, v = np.round(g.ego_to_cell(np.array([2.0, 0.0]))).astype(int)
    q = v * g.width + u
    assert rp.mask[q, 0] == 1
    # independent check: ray from the camera to the cell centre is within 95 deg of the axis
    X = np.append(g.cell_to_ego(np.array([u, v], float)), 0.0)
    d = X - rig[0].extrinsics.center
    ang = math.degrees(math.acos(d @ rig[0].extrinsics.rotation[2] / np.linalg.norm(d)))
    assert ang < 95.0


def test_cell_far_behind_invisible_to_front():
    g = BEVGrid()
    rp = bev_reference_points(g, default_rig())
    q = (g.height - 1) * g.width + g.width // 2  # bottom row = behind the ego
    assert rp.mask[q, 0] == 0
    assert rp.mask[q, 2] == 1


def test_every_cell_outside_ego_body_is_visible():
    g = BEVGrid()
    rp = bev_reference_points(g, default_rig())
    xy = g.cell_to_ego(g.positions())
    under_body = (np.abs(xy[:, 0]) < 2.0) & (np.abs(xy[:, 1]) < 1.0)
    seen = rp.mask.any(axis=1)
    assert seen[~under_body].all()
    # cells under the ego body are occluded by construction: the 95 degree
    # cone of each side-mounted camera cannot reach back under the vehicle
    assert not seen[under_body].all()


# ---------------------------------------------------------------- anisotropy


def test_anisotropy_isotropic_at_principal_point():
    eq = CameraIntrinsics(DistortionPoly(20.0), 31.5, 31.5, 64, 64)
    assert abs(anisotropy_at(eq, np.array([31.5, 31.5]))) < 1e-3
    intr = default_rig()[0].intrinsics
    assert abs(anisotropy_at(intr, np.array([intr.cx, intr.cy]))) < 1e-3
    h = anisotropy_heatmap(intr)
    assert np.nanmax(np.abs(h[31:33, 31:33])) < 1e-3


def test_anisotropy_ratio_at_least_one_and_nan_outside():
    intr = default_rig()[0].intrinsics
    h = anisotropy_heatmap(intr)
    finite = np.isfinite(h)
    assert finite.sum() > 2000
    assert np.all(h[finite] >= -1e-12)
    assert np.isnan(h[0, 0])


def test_anisotropy_monotone_along_radius():
    intr = default_rig()[0].intrinsics
    for ang in np.linspace(0, 2 * np.pi, 8, endpoint=False):
        r = np.linspace(0.5, intr.poly.r_max - 0.6, 60)
        pts = np.stack([intr.cx + r * np.cos(ang), intr.cy + r * np.sin(ang)], axis=-1)
        vals = anisotropy_at(intr, pts)
        assert np.all(np.diff(vals) >= -1e-9)
    # closed form for the sphere mapping: ratio = r / (r'(theta) sin(theta))
    theta = 1.2
    pt = np.array([intr.cx + intr.poly.eval(theta), intr.cy])
    expect = math.log10(intr.poly.eval(theta) / (intr.poly.slope(theta) * math.sin(theta)))
    assert anisotropy_at(intr, pt) == pytest.approx(expect, abs=1e-3)


# ---------------------------------------------------------------- rig files


def test_rig_text_round_trip():
    rig = default_rig()
    text = format_rig(rig)
    back = parse_rig(text)
    assert format_rig(back) == text
    for a, b in zip(rig, back):
        np.testing.assert_allclose(a.extrinsics.rotation, b.extrinsics.rotation, atol=1e-15)
        np.testing.assert_allclose(a.extrinsics.translation, b.extrinsics.translation, atol=1e-15)
        assert a.intrinsics == b.intrinsics


def test_rig_parse_errors():
    with pytest.raises(GeometryError, match="before any camera"):
        parse_rig("a1 = 3\n")
    with pytest.raises(GeometryError, match="unknown key"):
        parse_rig("camera = c\nfoo = 1\n")
    with pytest.raises(GeometryError, match="missing"):
        parse_rig("camera = c\na1 = 3\n")
