from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.signal import fftconvolve

from layerwatch.projection import (
    BehindCamera,
    CameraIntrinsics,
    CameraPose,
    DelimiterError,
    EmptySideView,
    PoseError,
    camera_look_at,
    default_plate,
    estimate_pose,
    load_camera_config,
    plane_homography,
    project_point,
    project_points,
    pseudo_side_view,
    save_camera_config,
    split_visible,
    virtual_top_view,
    visibility_delimiter,
)

IDENTITY_POSE = CameraPose(R=np.eye(3), t=np.zeros(3))


def _unit_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(f_x=1.0, f_y=1.0, c_x=0.0, c_y=0.0,
                            image_width=10, image_height=10)


def _hd_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(f_x=800.0, f_y=800.0, c_x=640.0, c_y=360.0,
                            image_width=1280, image_height=720)


def _plane_texture(x, y):
    """Smooth analytic plane pattern, evaluable at any world coordinate."""
    return (120.0 + 60.0 * np.sin(0.15 * x) * np.cos(0.11 * y)
            + 40.0 * np.exp(-((x - 8.0) ** 2 + (y + 5.0) ** 2) / 120.0))


def _render_plane(rig_k, rig_pose, plane_z, texture):
    """Forward-render the analytic plane pattern into a camera frame."""
    h_inv = np.linalg.inv(plane_homography(rig_k, rig_pose, plane_z))
    vv, uu = np.mgrid[0:rig_k.image_height, 0:rig_k.image_width].astype(float)
    w = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)])
    p = h_inv @ w
    x, y = p[0] / p[2], p[1] / p[2]
    frame = texture(x, y).reshape(rig_k.image_height, rig_k.image_width)
    return np.clip(frame, 0, 255).astype(np.uint8)


def test_unit_camera_projects_by_perspective_division():
    assert project_point((2.0, 3.0, 1.0), _unit_intrinsics(), IDENTITY_POSE) == (2.0, 3.0)
    u, v = project_point((2.0, 3.0, 2.0), _unit_intrinsics(), IDENTITY_POSE)
    assert (u, v) == (1.0, 1.5)


def test_offset_camera_example():
    pose = CameraPose(R=np.eye(3), t=np.array([0.0, 0.0, 2.0]))
    u, v = project_point((1.0, 0.0, 0.0), _hd_intrinsics(), pose)
    assert u == pytest.approx(1040.0)
    assert v == pytest.approx(360.0)


def test_points_behind_the_camera_are_rejected():
    with pytest.raises(BehindCamera):
        project_point((0.0, 0.0, -1.0), _unit_intrinsics(), IDENTITY_POSE)
    with pytest.raises(BehindCamera):
        project_point((0.0, 0.0, 0.0), _unit_intrinsics(), IDENTITY_POSE)


def test_plane_homography_agrees_with_full_projection():
    pose = camera_look_at(position=(0.0, -180.0, 160.0), target=(0.0, 0.0, 0.0))
    K = _hd_intrinsics()
    H = plane_homography(K, pose, plane_z=1.2)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-40, 40, size=(20, 2))
    via_h = (H @ np.column_stack([pts, np.ones(20)]).T).T
    via_h = via_h[:, :2] / via_h[:, 2:3]
    direct = project_points(np.column_stack([pts, np.full(20, 1.2)]), K, pose)
    assert np.allclose(via_h, direct, atol=1e-9)


def test_pose_recovery_from_seven_markers_is_tight():
    K = _hd_intrinsics()
    pose = camera_look_at(position=(10.0, -170.0, 150.0), target=(5.0, 0.0, 0.0))
    plate = default_plate()
    world = np.column_stack([plate.centers, np.zeros(7)])
    px = project_points(world, K, pose)
    est = estimate_pose(px, plate, K)
    # rotation error as the angle of R_est @ R_true^T
    rel = est.pose.R @ pose.R.T
    angle = math.degrees(math.acos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))
    assert angle < 0.1
    assert np.linalg.norm(est.pose.t - pose.t) < 0.5
    assert est.reprojection_rms < 0.1


def test_pose_recovery_of_a_fronto_parallel_camera():
    K = _hd_intrinsics()
    pose = CameraPose(R=np.eye(3), t=np.array([0.0, 0.0, 200.0]))
    plate = default_plate()
    world = np.column_stack([plate.centers, np.zeros(7)])
    est = estimate_pose(project_points(world, K, pose), plate, K)
    assert np.allclose(est.pose.R, np.eye(3), atol=1e-6)
    assert np.allclose(est.pose.t, pose.t, atol=1e-3)


def test_pose_recovery_needs_at_least_four_markers():
    K = _hd_intrinsics()
    pose = CameraPose(R=np.eye(3), t=np.array([0.0, 0.0, 200.0]))
    plate = default_plate()
    world = np.column_stack([plate.centers, np.zeros(7)])
    px = project_points(world, K, pose)
    with pytest.raises(PoseError):
        estimate_pose(px[:3], plate, K)


def test_virtual_top_view_round_trips_a_known_plane_pattern(rig):
    frame = _render_plane(rig.K, rig.pose, 1.2, _plane_texture)
    view = virtual_top_view(frame, rig.K, rig.pose, plane_z=1.2,
                            px_per_mm=rig.px_per_mm)
    n = view.image.shape[0]
    coords = np.arange(n) / rig.px_per_mm
    xx, yy = np.meshgrid(view.origin[0] + coords, view.origin[1] + coords)
    truth = np.clip(_plane_texture(xx, yy), 0, 255)
    mae = np.abs(view.image.astype(float) - truth).mean()
    assert mae < 2.0


def test_virtual_top_view_is_shift_equivariant_within_a_pixel(rig):
    frame_a = _render_plane(rig.K, rig.pose, 1.2, _plane_texture)
    frame_b = _render_plane(rig.K, rig.pose, 1.2,
                            lambda x, y: _plane_texture(x - 2.0, y + 1.0))
    view_a = virtual_top_view(frame_a, rig.K, rig.pose, 1.2, px_per_mm=rig.px_per_mm)
    view_b = virtual_top_view(frame_b, rig.K, rig.pose, 1.2, px_per_mm=rig.px_per_mm)
    a = view_a.image.astype(float) - view_a.image.mean()
    b = view_b.image.astype(float) - view_b.image.mean()
    corr = fftconvolve(b, a[::-1, ::-1], mode="same")
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    n = a.shape[0]
    dx, dy = peak[1] - n // 2, peak[0] - n // 2
    assert abs(dx - 2.0 * rig.px_per_mm) <= 1.0
    assert abs(dy - (-1.0) * rig.px_per_mm) <= 1.0


def test_plane_view_coordinate_round_trip(clean_view):
    pts = np.array([[0.0, 0.0], [10.0, -7.5], [-30.0, 22.0]])
    back = clean_view.px_to_world(clean_view.world_to_px(pts))
    assert np.allclose(back, pts, atol=1e-9)


def test_visibility_delimiter_through_the_extreme_points():
    m, b = visibility_delimiter([(0.0, 10.0), (10.0, 20.0)])
    assert m == pytest.approx(1.0)
    assert b == pytest.approx(10.0)
    m, b = visibility_delimiter([(0.0, 5.0), (4.0, 5.0), (10.0, 5.0)])
    assert m == pytest.approx(0.0)
    assert b == pytest.approx(5.0)


def test_visibility_delimiter_rejects_degenerate_input():
    with pytest.raises(DelimiterError):
        visibility_delimiter([(3.0, 1.0)])
    with pytest.raises(DelimiterError):
        visibility_delimiter([(2.0, 0.0), (2.0, 9.0)])


def test_split_visible_keeps_the_camera_facing_arc():
    outline_px = np.array([[0.0, 0.0], [5.0, 5.0], [10.0, 0.0], [5.0, -5.0]])
    m, b = visibility_delimiter(outline_px)
    near, far = split_visible(outline_px, outline_px, m, b)
    assert len(near) == 3  # both extremes plus the point below the line
    assert len(far) == 1
    assert np.allclose(far[0], [5.0, -5.0])


def test_pseudo_side_view_band_covers_two_extra_layer_heights(rig, layer5, clean_render):
    from layerwatch.gcode import layer_outline

    outline = layer_outline(layer5)[0]
    px = project_points(np.column_stack([outline, np.full(len(outline), layer5.z)]),
                        rig.K, rig.pose)
    m, b = visibility_delimiter(px)
    near, _ = split_visible(outline, px, m, b)
    band = pseudo_side_view(clean_render.frame, rig.K, rig.pose, near,
                            layer_height=0.2, current_layer=5,
                            px_per_mm=rig.px_per_mm)
    z_max = (5 + 2) * 0.2
    assert band.plane_z == pytest.approx(z_max)
    assert band.image.shape[0] == int(round(z_max * rig.px_per_mm)) + 1


def test_pseudo_side_view_rejects_an_empty_arc(rig, clean_render):
    with pytest.raises(EmptySideView):
        pseudo_side_view(clean_render.frame, rig.K, rig.pose,
                         np.zeros((0, 2)), layer_height=0.2, current_layer=0)


def test_camera_config_round_trips_numpy_scalar_fields(tmp_path):
    K = CameraIntrinsics(
        f_x=np.float64(1000.0), f_y=np.float64(1000.0),
        c_x=np.float64(640.0), c_y=np.float64(360.0),
        image_width=1280, image_height=720, k1=np.float64(-0.0312),
    )
    pose = camera_look_at(position=(0.0, -180.0, 160.0), target=(0.0, 0.0, 0.0))
    path = tmp_path / "camera.cfg"
    save_camera_config(path, K, pose, px_per_mm=np.float64(5.26))
    K2, pose2, ppm = load_camera_config(path)
    assert (K2.f_x, K2.f_y, K2.c_x, K2.c_y) == (1000.0, 1000.0, 640.0, 360.0)
    assert K2.k1 == -0.0312
    assert np.array_equal(pose2.R, pose.R)
    assert np.array_equal(pose2.t, pose.t)
    assert ppm == 5.26


def test_camera_look_at_faces_the_target():
    pose = camera_look_at(position=(0.0, -180.0, 160.0), target=(0.0, 0.0, 0.0))
    cam = pose.world_to_camera(np.array([[0.0, 0.0, 0.0]]))[0]
    assert cam[2] > 0  # target in front
    assert abs(cam[0]) < 1e-9 and abs(cam[1]) < 1e-9  # and centered
