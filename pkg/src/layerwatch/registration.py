"""Outline registration: template matching plus iterative closest point.

The reference outline (from the toolpaths) is rasterized into a binary
template and located in the edge image of the rectified top view by
normalized cross-correlation; that translation seeds an ICP refinement
estimating rotation, isotropic scale, and translation as a Transform2D.
Template matching does not search rotation; ICP covers the small-angle
range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve

from .geometry import Transform2D, polygon_centroid, resample_polyline
from .imageops import canny_edges, stroke_paths
from .projection import PlaneView

__all__ = [
    "RegistrationError",
    "TemplateError",
    "IcpError",
    "BinaryTemplate",
    "PointCloud2D",
    "MatchResult",
    "IcpResult",
    "RegState",
    "VerdictBands",
    "rasterize_template",
    "edge_map",
    "match_template",
    "sample_outline",
    "icp_register",
    "registration_verdict",
    "register_layer",
    "RegistrationResult",
]

MASK_WIDTH_PX = 30.0  # restrictive band reach, px, each side of the outline
OUTLINE_SAMPLE_MM = 0.5
MIN_MATCH_SCORE = 0.2
MATCH_BLUR_SIGMA = 4.0  # px; keeps the peak usable for small outline rotations


class RegistrationError(ValueError):
    pass


class TemplateError(RegistrationError):
    pass


class IcpError(RegistrationError):
    pass


@dataclass(frozen=True)
class BinaryTemplate:
    raster: np.ndarray  # bool
    px_per_mm: float
    anchor: tuple  # outline centroid in template pixels (col, row)
    origin_mm: tuple  # plane point mapped to template pixel (0, 0)

    def __post_init__(self):
        if not self.raster.any():
            raise TemplateError("template has no set pixels")


@dataclass(frozen=True)
class PointCloud2D:
    points: np.ndarray  # (N, 2)
    unit: str  # "mm" or "px"
    loop_starts: tuple | None = None  # start index of each closed loop, if ordered

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise RegistrationError("point cloud contains non-finite values")
        if self.unit not in ("mm", "px"):
            raise RegistrationError(f"unknown unit {self.unit!r}")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


def _as_loops(outline) -> list:
    if isinstance(outline, np.ndarray):
        return [outline]
    return [np.asarray(loop, dtype=float) for loop in outline]


def rasterize_template(outline, px_per_mm: float, stroke_px: int = 2) -> BinaryTemplate:
    """Stroke the outline loops onto a raster sized to their bounding box.

    The margin clears the stroke so no set pixel touches the border; the
    anchor is the outline centroid in template pixel coordinates.
    """
    loops = _as_loops(outline)
    all_pts = np.vstack(loops)
    if len(all_pts) < 3:
        raise TemplateError("outline needs at least 3 vertices")
    lo = all_pts.min(axis=0)
    hi = all_pts.max(axis=0)
    if np.any((hi - lo) * px_per_mm < 1.0):
        raise TemplateError("outline is degenerate at this resolution")
    margin = stroke_px  # px
    origin_mm = (lo[0] - margin / px_per_mm, lo[1] - margin / px_per_mm)
    size = np.ceil((hi - lo) * px_per_mm).astype(int) + 2 * margin + 1
    shape = (int(size[1]), int(size[0]))  # rows, cols
    paths = [(loop - np.asarray(origin_mm)) * px_per_mm for loop in loops]
    raster = stroke_paths(shape, paths, stroke_px) > 0
    centroid = polygon_centroid(max(loops, key=len))
    anchor = tuple((centroid - np.asarray(origin_mm)) * px_per_mm)
    return BinaryTemplate(raster=raster, px_per_mm=px_per_mm, anchor=anchor, origin_mm=origin_mm)


def edge_map(view: PlaneView) -> np.ndarray:
    """Binary edges of a rectified view (NMS + hysteresis)."""
    return canny_edges(view.image, sigma=1.4, high_frac=0.2, low_frac=0.08)


@dataclass(frozen=True)
class MatchResult:
    top_left: tuple  # (col, row) of best placement
    anchor_px: tuple  # template anchor position in edge-image pixels
    score: float


def match_template(edges: np.ndarray, template: BinaryTemplate,
                   blur_sigma: float = MATCH_BLUR_SIGMA) -> MatchResult:
    """Locate the template in a binary edge image by normalized correlation.

    Both rasters are smoothed with the same Gaussian before correlating:
    1-px edge strokes correlated raw lose all overlap under rotations of
    a few degrees, which would misread a recoverable tilt as an absent
    object. Smoothing both sides identically leaves the peak position and
    the perfect-match score of 1.0 unchanged. Scans every placement; the
    peak score is in [-1, 1] and invariant to affine intensity changes of
    the pre-image. Equal peaks break toward the smallest row, then column.
    """
    E = np.asarray(edges, dtype=float)
    T = template.raster.astype(float)
    if T.shape[0] > E.shape[0] or T.shape[1] > E.shape[1]:
        raise RegistrationError("template larger than search image")
    if blur_sigma > 0:
        # constant padding, so an isolated paste of the template into a
        # zero field blurs to exactly the blurred template
        E = gaussian_filter(E, blur_sigma, mode="constant")
        T = gaussian_filter(T, blur_sigma, mode="constant")
    n = T.size
    Tc = T - T.mean()
    t_var = float((Tc * Tc).sum())
    if t_var <= 0:
        raise TemplateError("template has zero variance")

    corr = fftconvolve(E, Tc[::-1, ::-1], mode="valid")
    # exact window statistics via integral images over E and E^2
    ii1 = np.pad(np.cumsum(np.cumsum(E, 0), 1), ((1, 0), (1, 0)))
    ii2 = np.pad(np.cumsum(np.cumsum(E * E, 0), 1), ((1, 0), (1, 0)))
    h, w = T.shape
    win1 = ii1[h:, w:] - ii1[:-h, w:] - ii1[h:, :-w] + ii1[:-h, :-w]
    win2 = ii2[h:, w:] - ii2[:-h, w:] - ii2[h:, :-w] + ii2[:-h, :-w]
    e_var = win2 - win1 * win1 / n
    denom = np.sqrt(t_var * np.clip(e_var, 0.0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.where(denom > 1e-9, corr / np.where(denom > 1e-9, denom, 1.0), 0.0)
    score = np.clip(score, -1.0, 1.0)

    flat = int(np.argmax(score))  # row-major: smallest row, then column
    row, col = divmod(flat, score.shape[1])
    anchor = (col + template.anchor[0], row + template.anchor[1])
    return MatchResult(top_left=(col, row), anchor_px=anchor, score=float(score[row, col]))


def sample_outline(outline, step_mm: float = OUTLINE_SAMPLE_MM) -> PointCloud2D:
    """Resample outline loops at fixed arc-length steps into a target cloud.

    Sample order follows each loop, and loop boundaries are recorded so
    consumers can reconstruct segment connectivity.
    """
    pts = []
    starts = []
    n = 0
    for loop in _as_loops(outline):
        samples = resample_polyline(loop, step_mm)
        # a closed loop repeats its first vertex; drop the duplicate
        if len(samples) > 1 and np.allclose(samples[0], samples[-1], atol=1e-9):
            samples = samples[:-1]
        starts.append(n)
        pts.append(samples)
        n += len(samples)
    return PointCloud2D(points=np.vstack(pts), unit="mm", loop_starts=tuple(starts))


class _GridIndex:
    """Uniform-grid nearest-neighbor index over 2-D points.

    Queries resolve in the 3x3 cell neighborhood; a hit farther than one
    cell cannot be trusted (a nearer point could sit outside the
    neighborhood), so those fall back to brute force.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = max(cell, 1e-9)
        self.brute = len(points) < 500
        if self.brute:
            return
        keys = np.floor(points / self.cell).astype(np.int64)
        self.buckets: dict = {}
        for idx, key in enumerate(map(tuple, keys)):
            self.buckets.setdefault(key, []).append(idx)
        self.neighborhood = {}
        for key in self.buckets:
            cand = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    cand.extend(self.buckets.get((key[0] + dx, key[1] + dy), ()))
            self.neighborhood[key] = np.asarray(cand)

    def _brute(self, queries: np.ndarray):
        d = np.hypot(
            queries[:, None, 0] - self.points[None, :, 0],
            queries[:, None, 1] - self.points[None, :, 1],
        )
        idx = d.argmin(axis=1)
        return idx, d[np.arange(len(queries)), idx]

    def nearest(self, queries: np.ndarray):
        if self.brute:
            return self._brute(queries)
        idx = np.full(len(queries), -1, dtype=np.int64)
        dist = np.full(len(queries), np.inf)
        keys = np.floor(queries / self.cell).astype(np.int64)
        order = {}
        for qi, key in enumerate(map(tuple, keys)):
            order.setdefault(key, []).append(qi)
        unresolved = []
        for key, qis in order.items():
            cand = self.neighborhood.get(key)
            if cand is None or len(cand) == 0:
                unresolved.extend(qis)
                continue
            q = queries[qis]
            c = self.points[cand]
            d = np.hypot(q[:, None, 0] - c[None, :, 0], q[:, None, 1] - c[None, :, 1])
            best = d.argmin(axis=1)
            bd = d[np.arange(len(qis)), best]
            for row, qi in enumerate(qis):
                if bd[row] <= self.cell:
                    idx[qi] = cand[best[row]]
                    dist[qi] = bd[row]
                else:
                    unresolved.append(qi)
        if unresolved:
            ii, dd = self._brute(queries[unresolved])
            idx[unresolved] = ii
            dist[unresolved] = dd
        return idx, dist


def _loop_neighbors(n: int, loop_starts) -> np.ndarray:
    """next-index table treating each loop as a closed cycle."""
    nxt = np.arange(1, n + 1)
    if loop_starts is None:
        nxt[-1] = n - 1  # open chain: degenerate last segment
        return nxt
    bounds = list(loop_starts) + [n]
    for a, b in zip(bounds, bounds[1:]):
        if b > a:
            nxt[b - 1] = a
    return nxt


def _nearest_feet(src: np.ndarray, moved: np.ndarray, original: np.ndarray,
                  nn: np.ndarray, nxt: np.ndarray):
    """Project each source point onto the outline near its nearest sample.

    Returns the foot points in original target coordinates plus the
    distances in the moved frame. Interpolating between samples keeps the
    correspondence continuous; snapping to discrete samples would let the
    fit lock into tangentially slid pairings that hide rotation.
    """
    feet_orig = original[nn].copy()
    dist = np.linalg.norm(src - moved[nn], axis=1)
    # candidate segments: into the nearest sample and out of it
    prv = np.arange(len(nxt))
    prv[nxt] = np.arange(len(nxt))
    for p0_idx, p1_idx in ((prv[nn], nn), (nn, nxt[nn])):
        p0 = moved[p0_idx]
        d = moved[p1_idx] - p0
        denom = (d * d).sum(axis=1)
        lam = np.clip(
            ((src - p0) * d).sum(axis=1) / np.where(denom > 1e-18, denom, 1.0), 0.0, 1.0
        )
        lam = np.where(denom > 1e-18, lam, 0.0)
        foot_moved = p0 + lam[:, None] * d
        cand = np.linalg.norm(src - foot_moved, axis=1)
        better = cand < dist
        o0 = original[p0_idx]
        foot_o = o0 + lam[:, None] * (original[p1_idx] - o0)
        feet_orig[better] = foot_o[better]
        dist[better] = cand[better]
    return feet_orig, dist


def _similarity_fit(x: np.ndarray, y: np.ndarray):
    """Closed-form least-squares similarity: y ≈ s·R·x + t.

    Minimizes the mean squared error over fixed correspondences; the
    scale is isotropic.
    """
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    var_x = float((xc * xc).sum()) / len(x)
    if var_x < 1e-12:
        raise IcpError("degenerate target cloud (zero spread)")
    cov = (yc.T @ xc) / len(x)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(2)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[1, 1] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S)) / var_x
    if s <= 0:
        raise IcpError("similarity fit collapsed to non-positive scale")
    t = my - s * (R @ mx)
    return s, R, t


@dataclass(frozen=True)
class IcpResult:
    transform: Transform2D
    residual: float  # mean squared error, mm^2
    iterations: int
    converged: bool
    pair_count: int
    pivot: tuple


def icp_register(
    source: PointCloud2D,
    target: PointCloud2D,
    init: Transform2D,
    mask_width_px: float = MASK_WIDTH_PX,
    px_per_mm: float = 5.26,
    pivot=None,
    max_iter: int = 50,
    tol: float = 1e-6,
    exclude: PointCloud2D | None = None,
) -> IcpResult:
    """Fit the similarity transform carrying the reference outline onto
    the detected edge points.

    Each iteration pairs every masked source point with the nearest
    point on the transformed target outline (foot points interpolated
    between samples), then refits the transform in closed form from the
    original target coordinates, so the mean squared residual never
    increases. The restrictive mask keeps only source points within
    mask_width_px of the initialized outline; points lying nearer to a
    known non-outline feature (``exclude``, e.g. a skirt loop placed the
    same way) are dropped from the mask as well.
    """
    if source.unit != target.unit:
        raise RegistrationError("source and target units differ")
    src = source.points
    tgt = target.points
    if len(src) < 3 or len(tgt) < 3:
        raise IcpError("point clouds need at least 3 points")

    mask_mm = mask_width_px / px_per_mm
    if pivot is None:
        pivot = tgt.mean(axis=0)
    pivot = np.asarray(pivot, dtype=float)

    x = tgt - pivot  # fit in pivot-centered target coordinates
    nxt = _loop_neighbors(len(tgt), target.loop_starts)
    theta, scale = init.theta, (init.s_x + init.s_y) / 2.0
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s], [s, c]])
    trans = pivot + scale * np.array([init.t_x, init.t_y])

    placed = (scale * (x @ R.T)) + trans
    index = _GridIndex(placed, mask_mm)
    nn, _ = index.nearest(src)
    _, d0 = _nearest_feet(src, placed, x, nn, nxt)
    keep = d0 <= mask_mm
    if exclude is not None and len(exclude.points) >= 2:
        if exclude.unit != target.unit:
            raise RegistrationError("exclude and target units differ")
        ex = exclude.points - pivot
        ex_nxt = _loop_neighbors(len(ex), exclude.loop_starts)
        placed_ex = (scale * (ex @ R.T)) + trans
        nn_ex, _ = _GridIndex(placed_ex, mask_mm).nearest(src)
        _, d_ex = _nearest_feet(src, placed_ex, ex, nn_ex, ex_nxt)
        keep &= d0 < d_ex
    src = src[keep]
    if len(src) < 3:
        raise IcpError("restrictive mask left fewer than 3 source points")

    def evaluate(q):
        th, sc, tx, ty = q
        Rm = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        moved = sc * (x @ Rm.T) + np.array([tx, ty])
        nn_, _ = _GridIndex(moved, mask_mm).nearest(src)
        _, d = _nearest_feet(src, moved, x, nn_, nxt)
        return float((d * d).mean())

    q = np.array([theta, scale, trans[0], trans[1]])
    prev_step = None
    residual = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        th, sc = q[0], q[1]
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        moved = sc * (x @ R.T) + q[2:]
        index = _GridIndex(moved, mask_mm)
        nn, _ = index.nearest(src)
        feet, _ = _nearest_feet(src, moved, x, nn, nxt)
        fit_s, fit_R, fit_t = _similarity_fit(feet, src)
        err = src - (fit_s * (feet @ fit_R.T) + fit_t)
        new_residual = float((err * err).sum(axis=1).mean())
        if new_residual > residual + 1e-12:
            raise IcpError("residual increased between iterations")
        done = residual - new_residual < tol or new_residual < 1e-12
        residual = new_residual

        q_new = np.array([math.atan2(fit_R[1, 0], fit_R[0, 0]), fit_s, fit_t[0], fit_t[1]])
        step = q_new - q
        step[0] = math.remainder(step[0], math.tau)
        # tangential sliding makes plain iteration creep; when the update
        # direction is stable, probe extrapolated transforms and keep the
        # best (residual-guarded, so monotonicity is unaffected)
        if not done and prev_step is not None:
            nn_prev = np.linalg.norm(prev_step)
            nn_step = np.linalg.norm(step)
            if nn_prev > 0 and nn_step > 0 and prev_step @ step > 0.9 * nn_prev * nn_step:
                best_q, best_e = q_new, evaluate(q_new)
                for alpha in (4.0, 16.0, 64.0):
                    q_try = q_new + alpha * step
                    if q_try[1] <= 0.1:
                        break
                    e_try = evaluate(q_try)
                    if e_try < best_e:
                        best_q, best_e = q_try, e_try
                    else:
                        break
                q_new = best_q
        prev_step = step
        q = q_new
        if done:
            converged = True
            break

    theta, scale, trans = q[0], q[1], q[2:]
    t_vec = (trans - pivot) / scale
    transform = Transform2D(
        theta=theta, s_x=scale, s_y=scale, t_x=float(t_vec[0]), t_y=float(t_vec[1])
    )
    return IcpResult(
        transform=transform,
        residual=residual,
        iterations=iterations,
        converged=converged,
        pair_count=len(src),
        pivot=tuple(pivot),
    )


class RegState(Enum):
    ALIGNED = "aligned"
    CORRECTED = "corrected"
    FAILURE = "failure"


@dataclass(frozen=True)
class VerdictBands:
    aligned_deg: float = 2.0
    aligned_mm: float = 1.7
    max_deg: float = 10.0
    max_mm: float = 8.0
    aligned_scale: float = 0.02
    max_scale: float = 0.15
    min_score: float = MIN_MATCH_SCORE


def registration_verdict(
    t: Transform2D,
    residual: float,
    score: float | None = None,
    bands: VerdictBands = VerdictBands(),
) -> RegState:
    """Classify a measured outline transform against the tolerance bands.

    Deviations inside the nominal noise band are Aligned (no action);
    larger ones within the recoverable range are Corrected; beyond that,
    or with an untrustworthy match score, Failure.
    """
    if score is not None and score < bands.min_score:
        return RegState.FAILURE
    deg, mm = t.magnitude()
    scale_dev = max(abs(t.s_x - 1.0), abs(t.s_y - 1.0))
    if deg <= bands.aligned_deg and mm <= bands.aligned_mm and scale_dev <= bands.aligned_scale:
        return RegState.ALIGNED
    if deg <= bands.max_deg and mm <= bands.max_mm and scale_dev <= bands.max_scale:
        return RegState.CORRECTED
    return RegState.FAILURE


@dataclass(frozen=True)
class RegistrationResult:
    state: RegState
    transform: Transform2D
    residual: float
    score: float
    offset_px: tuple  # template displacement from nominal placement (dx, dy)
    iterations: int
    converged: bool
    pivot: tuple


def register_layer(
    view: PlaneView,
    outline,
    mask_width_px: float = MASK_WIDTH_PX,
    bands: VerdictBands = VerdictBands(),
    exclude=None,
) -> RegistrationResult:
    """Full outline check of one rectified view against its reference outline.

    ``exclude`` lists loops of other features expected in the view (for
    example a first-layer skirt) whose edges must not take part in the
    outline fit.
    """
    loops = _as_loops(outline)
    template = rasterize_template(loops, view.px_per_mm)
    edges = edge_map(view)
    match = match_template(edges, template)

    expected_tl = (np.asarray(template.origin_mm) - np.asarray(view.origin)) * view.px_per_mm
    offset = np.asarray(match.top_left, dtype=float) - expected_tl
    shift_mm = offset / view.px_per_mm

    rows, cols = np.nonzero(edges)
    source = PointCloud2D(points=view.px_to_world(np.stack([cols, rows], axis=1)), unit="mm")
    target = sample_outline(loops)
    pivot = polygon_centroid(max(loops, key=len))
    init = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=float(shift_mm[0]), t_y=float(shift_mm[1]))
    excl_cloud = sample_outline(_as_loops(exclude)) if exclude else None

    try:
        icp = icp_register(
            source, target, init, mask_width_px=mask_width_px,
            px_per_mm=view.px_per_mm, pivot=pivot, exclude=excl_cloud,
        )
    except IcpError:
        return RegistrationResult(
            state=RegState.FAILURE,
            transform=init,
            residual=math.inf,
            score=match.score,
            offset_px=tuple(offset),
            iterations=0,
            converged=False,
            pivot=tuple(pivot),
        )
    state = registration_verdict(icp.transform, icp.residual, score=match.score, bands=bands)
    return RegistrationResult(
        state=state,
        transform=icp.transform,
        residual=icp.residual,
        score=match.score,
        offset_px=tuple(offset),
        iterations=icp.iterations,
        converged=icp.converged,
        pivot=tuple(icp.pivot),
    )
