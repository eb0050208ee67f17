"""Camera model, plate-based pose estimation, and the two derived views.

World coordinates are plate coordinates: origin at the bed center, x/y in
the bed plane (mm), z up. The camera maps world points to pixels through
x_cam = R·X + t followed by the pinhole intrinsics; pixel rows grow
downward. The virtual top view metrically rectifies the current layer
plane; the pseudo-side view unwraps the camera-facing outline arc into a
height band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import polyline_length, resample_polyline
from .imageops import sample_bilinear, to_gray, to_uint8

__all__ = [
    "ProjectionError",
    "BehindCamera",
    "PoseError",
    "DelimiterError",
    "EmptySideView",
    "CameraIntrinsics",
    "CameraPose",
    "Marker",
    "MarkerPlate",
    "PlaneView",
    "default_plate",
    "camera_look_at",
    "project_point",
    "project_points",
    "plane_homography",
    "estimate_pose",
    "PoseEstimate",
    "undistort_image",
    "virtual_top_view",
    "visibility_delimiter",
    "split_visible",
    "pseudo_side_view",
    "load_camera_config",
    "save_camera_config",
]

DEFAULT_PX_PER_MM = 5.26
PRINTABLE_MM = 88.0

_EPS = 1e-9


class ProjectionError(ValueError):
    pass


class BehindCamera(ProjectionError):
    pass


class PoseError(ProjectionError):
    pass


class DelimiterError(ProjectionError):
    pass


class EmptySideView(ProjectionError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    image_width: int
    image_height: int
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if self.f_x <= 0 or self.f_y <= 0:
            raise ProjectionError("focal lengths must be positive")
        if not (0 <= self.c_x < self.image_width and 0 <= self.c_y < self.image_height):
            raise ProjectionError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8):
            raise ProjectionError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ProjectionError("rotation determinant is not +1")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.R.T + self.t


@dataclass(frozen=True)
class Marker:
    center: tuple  # (x, y) mm on the plate plane
    side: float  # mm


@dataclass(frozen=True)
class MarkerPlate:
    markers: tuple
    printable_mm: float = PRINTABLE_MM
    extent_mm: float = 60.0  # plate half-size

    def __post_init__(self):
        if len(self.markers) != 7:
            raise ProjectionError("plate requires exactly 7 markers")
        for m in self.markers:
            h = m.side / 2.0
            if abs(m.center[0]) + h > self.extent_mm or abs(m.center[1]) + h > self.extent_mm:
                raise ProjectionError("marker outside plate bounds")
        for i, a in enumerate(self.markers):
            for b in self.markers[i + 1 :]:
                gap = (a.side + b.side) / 2.0
                if abs(a.center[0] - b.center[0]) < gap and abs(a.center[1] - b.center[1]) < gap:
                    raise ProjectionError("markers overlap")

    @property
    def centers(self) -> np.ndarray:
        return np.array([m.center for m in self.markers], dtype=float)


def default_plate() -> MarkerPlate:
    """Seven markers ringing the printable square: 15 mm corners, 10 mm edges.

    One corner is left empty so the layout has no rotational symmetry and
    the pose is unambiguous.
    """
    big, small = 15.0, 10.0
    return MarkerPlate(
        markers=(
            Marker((-52.0, -52.0), big),
            Marker((52.0, -52.0), big),
            Marker((52.0, 52.0), big),
            Marker((-52.0, 52.0), big),
            Marker((0.0, -52.0), small),
            Marker((52.0, 0.0), small),
            Marker((0.0, 52.0), small),
        )
    )


def camera_look_at(position, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose for a camera at `position` aimed at `target`; +z optical axis."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    n = np.linalg.norm(forward)
    if n < _EPS:
        raise ProjectionError("camera position equals target")
    forward /= n
    right = np.cross(forward, np.asarray(up, dtype=float))
    rn = np.linalg.norm(right)
    if rn < _EPS:  # looking straight along `up`
        right = np.cross(forward, (0.0, 1.0, 0.0))
        rn = np.linalg.norm(right)
    right /= rn
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraPose(R=R, t=-R @ position)


def project_points(points, K: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Pinhole projection of (N, 3) world points to (N, 2) pixels."""
    cam = pose.world_to_camera(points)
    z = cam[:, 2]
    if np.any(z <= _EPS):
        raise BehindCamera("point at or behind the camera plane")
    u = K.f_x * cam[:, 0] / z + K.c_x
    v = K.f_y * cam[:, 1] / z + K.c_y
    return np.stack([u, v], axis=1)


def project_point(p_world, K: CameraIntrinsics, pose: CameraPose):
    return tuple(project_points(np.asarray(p_world, dtype=float)[None, :], K, pose)[0])


def plane_homography(K: CameraIntrinsics, pose: CameraPose, plane_z: float) -> np.ndarray:
    """Homography mapping plane coordinates (x, y, 1) at height plane_z to pixels."""
    r1, r2, r3 = pose.R[:, 0], pose.R[:, 1], pose.R[:, 2]
    return K.K @ np.column_stack([r1, r2, r3 * plane_z + pose.t])


@dataclass(frozen=True)
class PoseEstimate:
    pose: CameraPose
    reprojection_rms: float


def _normalize_2d(pts: np.ndarray):
    centroid = pts.mean(axis=0)
    d = np.linalg.norm(pts - centroid, axis=1).mean()
    if d < _EPS:
        raise PoseError("degenerate point configuration")
    s = math.sqrt(2.0) / d
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]])
    homog = np.column_stack([pts, np.ones(len(pts))])
    return homog @ T.T, T


def estimate_pose(marker_pixels, plate: MarkerPlate, K: CameraIntrinsics) -> PoseEstimate:
    """Recover the camera pose from detected marker centers.

    Fits the plate-to-image homography by normalized DLT, then
    decomposes it with the intrinsics. The sign ambiguity is resolved by
    requiring the plate in front of the camera (positive t_z).
    """
    px = np.asarray(marker_pixels, dtype=float).reshape(-1, 2)
    world = plate.centers[: len(px)]
    if len(px) < 4:
        raise PoseError(f"need at least 4 markers, got {len(px)}")
    centered = world - world.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-6) < 2:
        raise PoseError("marker centers are collinear")

    src, T_src = _normalize_2d(world)
    dst, T_dst = _normalize_2d(px)
    rows = []
    for (X, Y, _), (u, v, _) in zip(src, dst):
        rows.append([-X, -Y, -1, 0, 0, 0, u * X, u * Y, u])
        rows.append([0, 0, 0, -X, -Y, -1, v * X, v * Y, v])
    _, s, vt = np.linalg.svd(np.asarray(rows))
    if s[-2] < 1e-9:
        raise PoseError("degenerate marker configuration")
    H = np.linalg.inv(T_dst) @ vt[-1].reshape(3, 3) @ T_src

    M = np.linalg.inv(K.K) @ H
    lam = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    if (lam * M[2, 2]) < 0:
        lam = -lam
    r1 = lam * M[:, 0]
    r2 = lam * M[:, 1]
    t = lam * M[:, 2]
    R0 = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(R0)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt

    pose = CameraPose(R=R, t=t)
    world3 = np.column_stack([world, np.zeros(len(world))])
    reproj = project_points(world3, K, pose)
    rms = float(np.sqrt(np.mean(np.sum((reproj - px) ** 2, axis=1))))
    return PoseEstimate(pose=pose, reprojection_rms=rms)


def undistort_image(frame: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Resample away radial distortion; identity when k1 = k2 = 0."""
    if K.k1 == 0.0 and K.k2 == 0.0:
        return frame
    gray = to_gray(frame)
    vv, uu = np.mgrid[0 : gray.shape[0], 0 : gray.shape[1]]
    xn = (uu - K.c_x) / K.f_x
    yn = (vv - K.c_y) / K.f_y
    r2 = xn * xn + yn * yn
    factor = 1.0 + K.k1 * r2 + K.k2 * r2 * r2
    ud = K.f_x * xn * factor + K.c_x
    vd = K.f_y * yn * factor + K.c_y
    return sample_bilinear(gray, vd.ravel(), ud.ravel()).reshape(gray.shape)


@dataclass
class PlaneView:
    """Metrically rectified raster: pixel (r, c) ↔ plane point
    (origin_x + c/px_per_mm, origin_y + r/px_per_mm) at height plane_z.

    Side-view bands reuse the container with rows meaning height:
    z = plane_z − r/px_per_mm (row 0 is the band top).
    """

    image: np.ndarray
    px_per_mm: float
    origin: tuple
    plane_z: float

    def __post_init__(self):
        if self.px_per_mm <= 0:
            raise ProjectionError("px_per_mm must be positive")

    @property
    def shape(self) -> tuple:
        return self.image.shape

    def world_to_px(self, points_mm) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points_mm, dtype=float))
        cols = (pts[:, 0] - self.origin[0]) * self.px_per_mm
        rows = (pts[:, 1] - self.origin[1]) * self.px_per_mm
        return np.stack([cols, rows], axis=1)

    def px_to_world(self, cols_rows) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(cols_rows, dtype=float))
        x = self.origin[0] + pts[:, 0] / self.px_per_mm
        y = self.origin[1] + pts[:, 1] / self.px_per_mm
        return np.stack([x, y], axis=1)


def virtual_top_view(
    frame: np.ndarray,
    K: CameraIntrinsics,
    pose: CameraPose,
    plane_z: float,
    px_per_mm: float = DEFAULT_PX_PER_MM,
    extent_mm: float = PRINTABLE_MM,
) -> PlaneView:
    """Rectify the layer plane at plane_z over the printable square.

    Inverse warp: every output pixel maps to a plane point, projects into
    the frame, and samples bilinearly. Out-of-frame or behind-camera
    pixels are 0.
    """
    gray = to_gray(frame)
    half = extent_mm / 2.0
    n = int(round(extent_mm * px_per_mm)) + 1
    origin = (-half, -half)
    coords = np.arange(n) / px_per_mm
    xs = origin[0] + coords
    ys = origin[1] + coords
    xx, yy = np.meshgrid(xs, ys)

    R, t = pose.R, pose.t
    cam = (
        np.stack([xx, yy, np.full_like(xx, plane_z)], axis=-1).reshape(-1, 3) @ R.T + t
    )
    z = cam[:, 2]
    if np.all(z <= _EPS):
        raise BehindCamera("layer plane behind the camera")
    safe = z > _EPS
    u = np.where(safe, K.f_x * cam[:, 0] / np.where(safe, z, 1.0) + K.c_x, -1.0)
    v = np.where(safe, K.f_y * cam[:, 1] / np.where(safe, z, 1.0) + K.c_y, -1.0)
    view = sample_bilinear(gray, v, u).reshape(n, n)
    return PlaneView(image=to_uint8(view), px_per_mm=px_per_mm, origin=origin, plane_z=plane_z)


def visibility_delimiter(outline_px) -> tuple:
    """Line through the extreme-x projected outline points.

    Returns (m, b) of v = m·u + b. Among ties the first point in input
    order wins.
    """
    pts = np.atleast_2d(np.asarray(outline_px, dtype=float))
    if len(pts) < 2:
        raise DelimiterError("need at least two outline points")
    i_min = int(np.argmin(pts[:, 0]))
    i_max = int(np.argmax(pts[:, 0]))
    x1, y1 = pts[i_min]
    x2, y2 = pts[i_max]
    if abs(x2 - x1) < _EPS:
        raise DelimiterError("outline has no horizontal extent")
    m, b = np.linalg.solve(np.array([[x1, 1.0], [x2, 1.0]]), np.array([y1, y2]))
    return float(m), float(b)


def split_visible(outline_mm, outline_px, m: float, b: float):
    """Partition outline points into camera-facing and far arcs.

    The camera-facing arc projects below the delimiter (image rows grow
    downward), strictly for interior points and inclusively at the
    extremes.
    """
    outline_mm = np.atleast_2d(np.asarray(outline_mm, dtype=float))
    outline_px = np.atleast_2d(np.asarray(outline_px, dtype=float))
    below = outline_px[:, 1] >= m * outline_px[:, 0] + b - 1e-9
    return outline_mm[below], outline_mm[~below]


def pseudo_side_view(
    frame: np.ndarray,
    K: CameraIntrinsics,
    pose: CameraPose,
    visible_outline_mm,
    layer_height: float,
    current_layer: int,
    px_per_mm: float = DEFAULT_PX_PER_MM,
) -> PlaneView:
    """Unwrap the visible side band into a rectangle.

    Columns follow arc length along the visible outline (one column per
    1/px_per_mm of path); rows are height, row 0 at the band top
    z_max = (current_layer + 2)·layer_height, the bottom row at z = 0. A
    curved wall therefore appears as a straight horizontal band.
    """
    outline = np.atleast_2d(np.asarray(visible_outline_mm, dtype=float))
    if len(outline) < 2 or polyline_length(outline) < 1.0 / px_per_mm:
        raise EmptySideView("no visible outline arc")
    z_max = (current_layer + 2) * layer_height
    samples = resample_polyline(outline, 1.0 / px_per_mm)
    rows = int(round(z_max * px_per_mm)) + 1
    zs = z_max - np.arange(rows) / px_per_mm

    gray = to_gray(frame)
    pts = np.empty((rows, len(samples), 3))
    pts[:, :, 0] = samples[None, :, 0]
    pts[:, :, 1] = samples[None, :, 1]
    pts[:, :, 2] = zs[:, None]
    cam = pts.reshape(-1, 3) @ pose.R.T + pose.t
    z = cam[:, 2]
    if np.all(z <= _EPS):
        raise BehindCamera("side band behind the camera")
    safe = z > _EPS
    u = np.where(safe, K.f_x * cam[:, 0] / np.where(safe, z, 1.0) + K.c_x, -1.0)
    v = np.where(safe, K.f_y * cam[:, 1] / np.where(safe, z, 1.0) + K.c_y, -1.0)
    band = sample_bilinear(gray, v, u).reshape(rows, len(samples))
    return PlaneView(image=to_uint8(band), px_per_mm=px_per_mm, origin=(0.0, 0.0), plane_z=z_max)


# ---------------------------------------------------------------------------
# camera config file (key=value text)


def save_camera_config(path, K: CameraIntrinsics, pose: CameraPose | None = None,
                       px_per_mm: float | None = None) -> None:
    # repr(float(..)) round-trips exactly and stays plain text even when
    # a field arrives as a numpy scalar
    lines = [
        f"f_x={float(K.f_x)!r}",
        f"f_y={float(K.f_y)!r}",
        f"c_x={float(K.c_x)!r}",
        f"c_y={float(K.c_y)!r}",
        f"image_width={int(K.image_width)}",
        f"image_height={int(K.image_height)}",
        f"k1={float(K.k1)!r}",
        f"k2={float(K.k2)!r}",
    ]
    if pose is not None:
        lines.append("pose_r=" + ",".join(repr(float(x)) for x in pose.R.ravel()))
        lines.append("pose_t=" + ",".join(repr(float(x)) for x in pose.t))
    if px_per_mm is not None:
        lines.append(f"px_per_mm={float(px_per_mm)!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_camera_config(path):
    """Returns (CameraIntrinsics, CameraPose | None, px_per_mm | None)."""
    values = {}
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ProjectionError(f"camera config line {lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    try:
        K = CameraIntrinsics(
            f_x=float(values["f_x"]),
            f_y=float(values["f_y"]),
            c_x=float(values["c_x"]),
            c_y=float(values["c_y"]),
            image_width=int(values["image_width"]),
            image_height=int(values["image_height"]),
            k1=float(values.get("k1", 0.0)),
            k2=float(values.get("k2", 0.0)),
        )
    except KeyError as missing:
        raise ProjectionError(f"camera config missing {missing}") from None
    pose = None
    if "pose_r" in values and "pose_t" in values:
        R = np.array([float(x) for x in values["pose_r"].split(",")]).reshape(3, 3)
        t = np.array([float(x) for x in values["pose_t"].split(",")])
        pose = CameraPose(R=R, t=t)
    ppm = float(values["px_per_mm"]) if "px_per_mm" in values else None
    return K, pose, ppm
