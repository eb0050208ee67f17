"""Planar geometry primitives shared across the pipeline.

Coordinates are millimeters in the bed frame unless a function says
otherwise. Polylines are (N, 2) float arrays; closed outlines repeat the
first vertex at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TransformError(ValueError):
    """Raised when a transform is invalid or produces non-finite output."""


@dataclass(frozen=True)
class Transform2D:
    """Similarity-style layer correction: scale * rotation + translation.

    Applied to a point p (with the pivot already moved to the origin) as

        p' = diag(s_x, s_y) @ (R(theta) @ p + t)

    i.e. rotation and translation first, then the axis scales.
    """

    theta: float = 0.0
    s_x: float = 1.0
    s_y: float = 1.0
    t_x: float = 0.0
    t_y: float = 0.0

    def __post_init__(self):
        if not all(map(math.isfinite, (self.theta, self.s_x, self.s_y, self.t_x, self.t_y))):
            raise TransformError("non-finite transform parameters")
        if self.s_x <= 0 or self.s_y <= 0:
            raise TransformError("scale components must be positive")
        # normalize theta into (-pi, pi]
        theta = math.remainder(self.theta, 2.0 * math.pi)
        if theta <= -math.pi:
            theta += 2.0 * math.pi
        object.__setattr__(self, "theta", theta)

    @property
    def is_identity(self) -> bool:
        return (
            abs(self.theta) < 1e-15
            and self.s_x == 1.0
            and self.s_y == 1.0
            and self.t_x == 0.0
            and self.t_y == 0.0
        )

    def apply(self, points: np.ndarray, pivot=(0.0, 0.0)) -> np.ndarray:
        """Transform (N, 2) points about ``pivot``.

        The pivot is moved to the origin, the transform applied, and the
        pivot restored.
        """
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts) - np.asarray(pivot, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        x = pts[:, 0] * c - pts[:, 1] * s + self.t_x
        y = pts[:, 0] * s + pts[:, 1] * c + self.t_y
        out = np.column_stack([self.s_x * x, self.s_y * y]) + np.asarray(pivot, dtype=float)
        if not np.all(np.isfinite(out)):
            raise TransformError("transform produced non-finite coordinates")
        return out[0] if single else out

    def inverse(self) -> "Transform2D":
        """Exact inverse; only defined for isotropic scale (or theta = 0)."""
        isotropic = math.isclose(self.s_x, self.s_y, rel_tol=1e-12)
        if not isotropic and abs(self.theta) > 1e-12:
            raise TransformError("anisotropic transform with rotation is not invertible in-family")
        if isotropic:
            # forward: p' = s R p + s t  =>  p = (1/s) R^-1 p' - R^-1 t,
            # so theta' = -theta, s' = 1/s, t' = -s R(-theta) t
            s = self.s_x
            c, sn = math.cos(-self.theta), math.sin(-self.theta)
            tx = -(c * self.t_x - sn * self.t_y) * s
            ty = -(sn * self.t_x + c * self.t_y) * s
            return Transform2D(-self.theta, 1.0 / s, 1.0 / s, tx, ty)
        # theta == 0: p' = S p + S t  =>  p = S^-1 p' - t
        return Transform2D(0.0, 1.0 / self.s_x, 1.0 / self.s_y,
                           -self.t_x * self.s_x, -self.t_y * self.s_y)

    def magnitude(self) -> tuple[float, float]:
        """(|theta| in degrees, translation norm in mm) for verdict bands."""
        return math.degrees(abs(self.theta)), math.hypot(self.t_x, self.t_y)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a closed polygon (last vertex may repeat first)."""
    p = np.asarray(poly, dtype=float)
    if len(p) > 1 and np.allclose(p[0], p[-1]):
        p = p[:-1]
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    """Area centroid of a closed polygon; falls back to the vertex mean."""
    p = np.asarray(poly, dtype=float)
    if len(p) > 1 and np.allclose(p[0], p[-1]):
        p = p[:-1]
    a = polygon_area(p)
    if len(p) < 3 or abs(a) < 1e-12:
        return p.mean(axis=0)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    cx = float(np.sum((x + xn) * cross)) / (6.0 * a)
    cy = float(np.sum((y + yn) * cross)) / (6.0 * a)
    return np.array([cx, cy])


def point_in_polygon(point, poly: np.ndarray) -> bool:
    """Even-odd ray casting test."""
    x, y = float(point[0]), float(point[1])
    p = np.asarray(poly, dtype=float)
    if len(p) > 1 and np.allclose(p[0], p[-1]):
        p = p[:-1]
    inside = False
    n = len(p)
    for i in range(n):
        x1, y1 = p[i]
        x2, y2 = p[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xin = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if xin > x:
                inside = not inside
    return inside


def polyline_length(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(p, axis=0).T)))


def resample_polyline(poly: np.ndarray, step: float) -> np.ndarray:
    """Resample a polyline at roughly uniform arc-length spacing ``step``."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 2:
        return p.copy()
    seg = np.diff(p, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    total = cum[-1]
    if total <= 0:
        return p[:1].copy()
    n = max(int(math.ceil(total / step)), 1)
    s = np.linspace(0.0, total, n + 1)
    x = np.interp(s, cum, p[:, 0])
    y = np.interp(s, cum, p[:, 1])
    return np.column_stack([x, y])
