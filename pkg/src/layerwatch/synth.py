"""Synthetic print fixtures with known ground truth.

Renders camera frames of a G-code layer under a chosen camera, with
failures injected into the geometry or texture before projection, and
returns the exact truth (transform, per-column heights, anomaly mask)
alongside. Also generates the fixture G-code itself and simulates the
printer end of the line protocol, so a full closed-loop run needs no
hardware.

Rendering is deliberately flat shaded: per-category base intensity plus
seeded speckle. The side band is rendered directly in unwrapped band
space, which keeps the height truth pixel-exact instead of laundering
it through two projective resamplings.
"""

from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .gcode import Layer, PathCategory, Program, layer_outline, parse_gcode, transform_layer
from .geometry import Transform2D, polyline_length
from .imageops import sample_bilinear, save_gray, stroke_paths, to_uint8
from .projection import (
    DEFAULT_PX_PER_MM,
    PRINTABLE_MM,
    CameraIntrinsics,
    CameraPose,
    PlaneView,
    camera_look_at,
    plane_homography,
    save_camera_config,
)
from .texture import infill_mask

__all__ = [
    "InjectionError",
    "InjectionKind",
    "FailureInjection",
    "parse_injection",
    "parse_injections",
    "CameraRig",
    "default_rig",
    "TruthRecord",
    "RenderedLayer",
    "render_views",
    "render_program",
    "write_fixture_dir",
    "square_gcode",
    "octagon_gcode",
    "SimPrinter",
    "sim_printer",
]

# flat-shading intensities, gray levels
BED_LEVEL = 25.0
SKIRT_LEVEL = 120.0
SUPPORT_LEVEL = 110.0
INFILL_LEVEL = 190.0
WALL_LEVEL = 230.0
FOREIGN_LEVEL = 120.0
SIDE_WALL_LEVEL = 200.0
SIDE_BACKGROUND = 20.0
FRAME_BACKGROUND = 12.0
SPECKLE_SIGMA = 5.0
SIDE_PX_PER_MM = 20.0     # band pixel pitch; 0.05 mm edge quantization


class InjectionError(ValueError):
    pass


class InjectionKind(Enum):
    NONE = "none"
    SHIFT = "shift"
    ROTATE = "rotate"
    SCALE = "scale"
    MISSING_LAYER = "missing_layer"
    INFILL_GAP = "infill_gap"
    HEIGHT_ERROR = "height_error"
    FOREIGN_TEXTURE = "foreign_texture"


_AREA_KINDS = (InjectionKind.INFILL_GAP, InjectionKind.FOREIGN_TEXTURE)


@dataclass(frozen=True)
class FailureInjection:
    """One failure to bake into the rendered frames.

    ``layer_range`` is inclusive on both ends. Geometric kinds carry a
    transform; area kinds carry a fraction of the infill region and a
    location; height errors carry a millimeter offset over a column
    span given as fractions of the band width.
    """

    kind: InjectionKind = InjectionKind.NONE
    dx: float = 0.0
    dy: float = 0.0
    theta_deg: float = 0.0
    scale: float = 1.0
    fraction: float = 0.0
    location: object = "center"   # "center" | "edge" | (x, y) mm
    delta_mm: float = 0.0
    span: tuple = (0.0, 1.0)
    layer_range: tuple = (0, 10**9)

    def __post_init__(self):
        if self.kind in _AREA_KINDS and not (0.0 < self.fraction <= 1.0):
            raise InjectionError("area fraction must be in (0, 1]")
        if self.kind is InjectionKind.SCALE and self.scale <= 0:
            raise InjectionError("scale must be positive")
        a, b = self.span
        if not (0.0 <= a < b <= 1.0):
            raise InjectionError("span must satisfy 0 <= a < b <= 1")
        lo, hi = self.layer_range
        if lo > hi:
            raise InjectionError("layer range is empty")

    def applies(self, layer_index: int) -> bool:
        lo, hi = self.layer_range
        return lo <= layer_index <= hi

    def transform(self) -> Transform2D:
        """The geometric distortion this injection applies (identity for
        non-geometric kinds)."""
        if self.kind is InjectionKind.SHIFT:
            return Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=self.dx, t_y=self.dy)
        if self.kind is InjectionKind.ROTATE:
            return Transform2D(theta=math.radians(self.theta_deg), s_x=1.0, s_y=1.0,
                               t_x=0.0, t_y=0.0)
        if self.kind is InjectionKind.SCALE:
            return Transform2D(theta=0.0, s_x=self.scale, s_y=self.scale,
                               t_x=0.0, t_y=0.0)
        return Transform2D()


_RANGE_RE = re.compile(r"^(\d+)(?:\.\.(\d+))?$")


def _parse_location(token: str):
    if token in ("center", "edge"):
        return token
    parts = token.split("/")
    if len(parts) == 2:
        return (float(parts[0]), float(parts[1]))
    raise InjectionError(f"bad location {token!r} (center, edge, or x/y mm)")


def parse_injection(spec: str) -> FailureInjection:
    """Parse one injection spec: ``kind[:args][@a[..b]]``.

    Examples: ``shift:2,-3@5..10``, ``rotate:4@7``, ``scale:1.05``,
    ``missing_layer@12``, ``infill_gap:0.2@5``,
    ``infill_gap:0.2,10/-5@5``, ``height_error:0.5,0.2..0.8@6``,
    ``foreign_texture:0.25@4``.
    """
    spec = spec.strip()
    if not spec:
        raise InjectionError("empty injection spec")
    body, _, range_part = spec.partition("@")
    name, _, arg_part = body.partition(":")
    try:
        kind = InjectionKind(name.strip().lower())
    except ValueError:
        raise InjectionError(f"unknown injection kind {name!r}") from None

    layer_range = (0, 10**9)
    if range_part:
        m = _RANGE_RE.match(range_part.strip())
        if not m:
            raise InjectionError(f"bad layer range {range_part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        layer_range = (lo, hi)

    args = [a.strip() for a in arg_part.split(",")] if arg_part.strip() else []
    try:
        if kind is InjectionKind.SHIFT:
            dx, dy = (float(args[0]), float(args[1]))
            return FailureInjection(kind=kind, dx=dx, dy=dy, layer_range=layer_range)
        if kind is InjectionKind.ROTATE:
            return FailureInjection(kind=kind, theta_deg=float(args[0]),
                                    layer_range=layer_range)
        if kind is InjectionKind.SCALE:
            return FailureInjection(kind=kind, scale=float(args[0]),
                                    layer_range=layer_range)
        if kind in _AREA_KINDS:
            fraction = float(args[0])
            location = _parse_location(args[1]) if len(args) > 1 else "center"
            return FailureInjection(kind=kind, fraction=fraction, location=location,
                                    layer_range=layer_range)
        if kind is InjectionKind.HEIGHT_ERROR:
            delta = float(args[0])
            span = (0.0, 1.0)
            if len(args) > 1:
                a, _, b = args[1].partition("..")
                span = (float(a), float(b))
            return FailureInjection(kind=kind, delta_mm=delta, span=span,
                                    layer_range=layer_range)
        if args:
            raise InjectionError(f"{kind.value} takes no arguments")
        return FailureInjection(kind=kind, layer_range=layer_range)
    except (IndexError, ValueError) as exc:
        raise InjectionError(f"bad arguments for {kind.value}: {arg_part!r}") from exc


def parse_injections(specs) -> tuple:
    """Parse ``;``-separated specs (or an iterable of them) and check
    composability: two injections of the same kind must not overlap in
    layers."""
    if isinstance(specs, str):
        specs = [s for s in specs.split(";") if s.strip()]
    injections = [parse_injection(s) if isinstance(s, str) else s for s in specs]
    for i in range(len(injections)):
        for j in range(i + 1, len(injections)):
            a, b = injections[i], injections[j]
            if a.kind is b.kind and a.kind is not InjectionKind.NONE:
                if a.layer_range[0] <= b.layer_range[1] and b.layer_range[0] <= a.layer_range[1]:
                    raise InjectionError(
                        f"two {a.kind.value} injections overlap in layers"
                    )
    return tuple(injections)


# --- camera -------------------------------------------------------------------


@dataclass(frozen=True)
class CameraRig:
    K: CameraIntrinsics
    pose: CameraPose
    px_per_mm: float = DEFAULT_PX_PER_MM


def default_rig() -> CameraRig:
    """A 1280x720 camera 240 mm out, looking down at the bed center."""
    K = CameraIntrinsics(f_x=1000.0, f_y=1000.0, c_x=640.0, c_y=360.0,
                         image_width=1280, image_height=720)
    pose = camera_look_at(position=(0.0, -180.0, 160.0), target=(0.0, 0.0, 0.0))
    return CameraRig(K=K, pose=pose)


# --- truth --------------------------------------------------------------------


@dataclass(frozen=True)
class TruthRecord:
    layer_index: int
    transform: Transform2D            # injected geometric distortion
    heights: np.ndarray               # per band column, mm
    nominal_height: float             # (index+1) * layer_height, mm
    anomaly_mask: np.ndarray | None   # plane-view px, None when no area defect
    anomaly_fraction: float           # of the infill region
    injected: tuple                   # kind value strings
    missing: bool = False

    def to_json(self) -> dict:
        t = self.transform
        return {
            "layer": self.layer_index,
            "transform": {"theta_deg": math.degrees(t.theta), "s_x": t.s_x,
                          "s_y": t.s_y, "t_x": t.t_x, "t_y": t.t_y},
            "height_mean": float(np.mean(self.heights)) if self.heights.size else 0.0,
            "nominal_height": self.nominal_height,
            "anomaly_fraction": self.anomaly_fraction,
            "injected": list(self.injected),
            "missing": self.missing,
        }


@dataclass(frozen=True)
class RenderedLayer:
    frame: np.ndarray        # camera frame, uint8
    plane: PlaneView         # flat-shaded layer plane (pre-projection)
    side_band: PlaneView     # unwrapped side band, rows are height
    truth: TruthRecord


# --- plane rendering ----------------------------------------------------------

_CATEGORY_LEVELS = (
    (PathCategory.SKIRT, SKIRT_LEVEL),
    (PathCategory.SUPPORT, SUPPORT_LEVEL),
    (PathCategory.INFILL, INFILL_LEVEL),
    (PathCategory.INNER_WALL, WALL_LEVEL),
    (PathCategory.OUTER_WALL, WALL_LEVEL),
)


def _empty_view(px_per_mm: float, extent_mm: float, plane_z: float) -> PlaneView:
    half = extent_mm / 2.0
    n = int(round(extent_mm * px_per_mm)) + 1
    return PlaneView(image=np.zeros((n, n), dtype=np.uint8), px_per_mm=px_per_mm,
                     origin=(-half, -half), plane_z=plane_z)


def _category_raster(layer: Layer, view: PlaneView, category: PathCategory,
                     width_px: float) -> np.ndarray:
    segs = layer.segments_of(category)
    if not segs:
        return np.zeros(view.shape, dtype=bool)
    if category is PathCategory.INFILL:
        # integer stroke rasterization leaves hairline seams when the
        # pass pitch matches the width; round up so dense passes fuse
        width_px = math.ceil(width_px + 0.5)
    paths = [view.world_to_px([s.start, s.end]) for s in segs]
    return stroke_paths(view.shape, paths, width_px=width_px) > 0


def _disk_center(mask: np.ndarray, location) -> tuple:
    rows, cols = np.nonzero(mask)
    if isinstance(location, tuple):
        return location  # handled by caller in mm
    if location == "edge":
        # on the mask's left edge, vertically centered
        rmid = int(np.median(rows))
        row_cols = cols[rows == rmid]
        return (float(rmid), float(row_cols.min()))
    return (float(rows.mean()), float(cols.mean()))


def _area_disk(mask: np.ndarray, fraction: float, location, view: PlaneView) -> np.ndarray:
    """Boolean disk covering ``fraction`` of the mask's area, centered
    per the location spec."""
    area = int(mask.sum())
    if area == 0:
        return np.zeros(mask.shape, dtype=bool)
    if isinstance(location, tuple):
        col, row = view.world_to_px([location])[0]
        center = (float(row), float(col))
    else:
        center = _disk_center(mask, location)
    yy, xx = np.meshgrid(np.arange(mask.shape[0]), np.arange(mask.shape[1]),
                         indexing="ij")
    d2 = (yy - center[0]) ** 2 + (xx - center[1]) ** 2
    # grow the radius until the covered mask share reaches the target;
    # a plain pi r^2 undershoots when the disk overhangs the mask edge
    r = math.sqrt(fraction * area / math.pi)
    covered = ((d2 <= r * r) & mask).sum()
    target = fraction * area
    while covered < target and r < max(mask.shape):
        r *= 1.03
        covered = ((d2 <= r * r) & mask).sum()
    return (d2 <= r * r) & mask


def _foreign_patch(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Coarse blotchy texture, visibly unlike flat infill."""
    blobs = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), 6.0)
    blobs /= max(blobs.std(), 1e-9)
    return FOREIGN_LEVEL + 30.0 * blobs


def render_plane(layer: Layer, inj_list=(), seed: int = 0,
                 px_per_mm: float = DEFAULT_PX_PER_MM,
                 extent_mm: float = PRINTABLE_MM):
    """Flat-shaded top view of one layer in plane space.

    Returns (PlaneView, anomaly_mask or None, anomaly_fraction,
    transformed_layer). Geometry is distorted before painting; area
    defects carve or repaint the infill raster before the walls go on
    top, so wall pixels never count as anomalous.
    """
    rng = np.random.default_rng(seed)
    view = _empty_view(px_per_mm, extent_mm, plane_z=layer.z)

    for inj in inj_list:
        t = inj.transform()
        if not t.is_identity:
            layer = transform_layer(layer, t)

    width_px = max(layer.params.line_width * px_per_mm, 1.0)
    img = np.full(view.shape, BED_LEVEL)

    rasters = {cat: _category_raster(layer, view, cat, width_px)
               for cat, _ in _CATEGORY_LEVELS}

    anomaly_mask = None
    fraction = 0.0
    area_inj = [i for i in inj_list if i.kind in _AREA_KINDS]
    if area_inj:
        region = infill_mask(layer, view)
        for inj in area_inj:
            disk = _area_disk(region, inj.fraction, inj.location, view)
            if inj.kind is InjectionKind.INFILL_GAP:
                rasters[PathCategory.INFILL] = rasters[PathCategory.INFILL] & ~disk
            else:
                foreign = _foreign_patch(view.shape, rng)
                img[disk] = foreign[disk]
                # keep the patch from being painted over by healthy infill
                rasters[PathCategory.INFILL] = rasters[PathCategory.INFILL] & ~disk
            anomaly_mask = disk if anomaly_mask is None else (anomaly_mask | disk)
        denom = max(int(region.sum()), 1)
        fraction = float(anomaly_mask.sum()) / denom

    for cat, level in _CATEGORY_LEVELS:
        img[rasters[cat]] = level

    img += rng.normal(0.0, SPECKLE_SIGMA, img.shape)
    painted = replace(view, image=to_uint8(img))
    return painted, anomaly_mask, fraction, layer


# --- side band ----------------------------------------------------------------


def render_side_band(layer: Layer, inj_list=(), seed: int = 0,
                     px_per_mm: float = SIDE_PX_PER_MM):
    """Unwrapped side band with a pixel-exact top edge.

    Columns follow arc length along the layer outline, rows are height
    with row 0 at (index+2) layer heights. The band has its own pixel
    pitch, finer than the top view's, so edge quantization stays well
    under a layer height; the boundary row is coverage-blended for
    sub-pixel edge placement. Returns (PlaneView, heights) where
    heights is the true per-column material height in mm.
    """
    h = layer.layer_height
    z_top = (layer.index + 1) * h
    z_max = (layer.index + 2) * h

    loops = layer_outline(layer)
    length = sum(polyline_length(lp) for lp in loops)
    cols = max(int(round(length * px_per_mm)) + 1, 8)

    # every layer skipped at or below this index leaves the whole stack
    # one layer height short from then on, so this bypasses applies()
    missed = 0
    for inj in inj_list:
        if inj.kind is InjectionKind.MISSING_LAYER:
            lo, hi = inj.layer_range
            if lo <= layer.index:
                missed += min(hi, layer.index) - lo + 1
    heights = np.full(cols, max(z_top - missed * h, 0.0))

    for inj in inj_list:
        if not inj.applies(layer.index):
            continue
        if inj.kind is InjectionKind.HEIGHT_ERROR:
            a, b = inj.span
            lo, hi = int(a * cols), max(int(b * cols), int(a * cols) + 1)
            heights[lo:hi] = np.maximum(heights[lo:hi] + inj.delta_mm, 0.0)

    rows = int(round(z_max * px_per_mm)) + 1
    z_of_row = z_max - np.arange(rows) / px_per_mm
    px = 1.0 / px_per_mm
    # fraction of each pixel cell below the material edge
    coverage = np.clip(
        (heights[None, :] - (z_of_row[:, None] - px / 2.0)) / px, 0.0, 1.0
    )

    rng = np.random.default_rng(seed + 7919)
    # faint per-layer banding so the wall is not perfectly flat
    banding = 8.0 * np.sin(2.0 * math.pi * z_of_row / max(h, 1e-6))
    img = SIDE_BACKGROUND + coverage * (SIDE_WALL_LEVEL + banding[:, None] - SIDE_BACKGROUND)
    img += rng.normal(0.0, SPECKLE_SIGMA * 0.6, img.shape)

    band = PlaneView(image=to_uint8(img), px_per_mm=px_per_mm, origin=(0.0, 0.0),
                     plane_z=z_max)
    return band, heights


# --- frame compositing ---------------------------------------------------------


def _compose_frame(plane: PlaneView, rig: CameraRig, plane_z: float,
                   seed: int = 0) -> np.ndarray:
    """Project the painted plane through the camera; outside the plate
    the frame is dark."""
    H = plane_homography(rig.K, rig.pose, plane_z)
    Hinv = np.linalg.inv(H)
    h, w = rig.K.image_height, rig.K.image_width
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    back = pix @ Hinv.T
    wcoord = back[:, 2]
    safe = np.abs(wcoord) > 1e-12
    xy = np.where(safe[:, None], back[:, :2] / np.where(safe, wcoord, 1.0)[:, None], 1e9)

    cols = (xy[:, 0] - plane.origin[0]) * plane.px_per_mm
    rows = (xy[:, 1] - plane.origin[1]) * plane.px_per_mm
    n_rows, n_cols = plane.image.shape
    inside = (cols >= 0) & (cols <= n_cols - 1) & (rows >= 0) & (rows <= n_rows - 1)
    sampled = sample_bilinear(plane.image.astype(float), rows, cols)
    frame = np.where(inside, sampled, FRAME_BACKGROUND).reshape(h, w)

    rng = np.random.default_rng(seed + 104729)
    frame = frame + rng.normal(0.0, 2.0, frame.shape)
    return to_uint8(frame)


def render_views(layer: Layer, camera: CameraRig | None = None, inj=None,
                 seed: int = 0) -> RenderedLayer:
    """Render one layer's camera frame plus exact ground truth.

    ``inj`` is a FailureInjection, an iterable of them, or None; only
    injections whose layer range covers this layer apply.
    """
    rig = camera or default_rig()
    if inj is None:
        inj_list = ()
    elif isinstance(inj, FailureInjection):
        inj_list = (inj,)
    else:
        inj_list = tuple(inj)
    active = tuple(i for i in inj_list
                   if i.kind is not InjectionKind.NONE and i.applies(layer.index))

    plane, anomaly_mask, fraction, distorted = render_plane(
        layer, active, seed=seed, px_per_mm=rig.px_per_mm)
    # full list, not just active: a layer missed earlier keeps lowering
    # the stack on every later layer
    band, heights = render_side_band(layer, inj_list, seed=seed)
    frame = _compose_frame(plane, rig, plane_z=layer.z, seed=seed)

    geo = Transform2D()
    for i in active:
        t = i.transform()
        if not t.is_identity:
            geo = t
    truth = TruthRecord(
        layer_index=layer.index,
        transform=geo,
        heights=heights,
        nominal_height=(layer.index + 1) * layer.layer_height,
        anomaly_mask=anomaly_mask,
        anomaly_fraction=fraction,
        injected=tuple(i.kind.value for i in active),
        missing=any(i.kind is InjectionKind.MISSING_LAYER for i in active),
    )
    return RenderedLayer(frame=frame, plane=plane, side_band=band, truth=truth)


def render_program(program: Program, camera: CameraRig | None = None,
                   injections=(), seed: int = 0):
    """Yield RenderedLayer for every layer of the program."""
    for layer in program.layers:
        yield render_views(layer, camera, injections, seed=seed + layer.index)


def write_fixture_dir(out_dir, gcode_text: str, camera: CameraRig | None = None,
                      injections=(), seed: int = 0) -> Path:
    """Persist a frames directory the analysis harness can consume.

    Writes layer_%04d.png camera frames, side_%04d.png unwrapped bands,
    truth.jsonl, camera.cfg, and the G-code itself as model.gcode.
    """
    rig = camera or default_rig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.gcode").write_text(gcode_text, encoding="ascii")
    save_camera_config(out / "camera.cfg", rig.K, rig.pose, rig.px_per_mm)

    program = parse_gcode(gcode_text)
    with open(out / "truth.jsonl", "w", encoding="ascii") as fh:
        for rendered in render_program(program, rig, injections, seed=seed):
            k = rendered.truth.layer_index
            save_gray(out / f"layer_{k:04d}.png", rendered.frame)
            save_gray(out / f"side_{k:04d}.png", rendered.side_band.image)
            fh.write(json.dumps(rendered.truth.to_json()) + "\n")
    return out


# --- fixture G-code -------------------------------------------------------------


def _loop_lines(points, z: float, feed: float, e_start: float, e_per_mm: float):
    lines = []
    e = e_start
    x0, y0 = points[0]
    lines.append(f"G0 X{x0:.3f} Y{y0:.3f} Z{z:.3f} F3000")
    prev = points[0]
    for p in points[1:]:
        e += math.dist(prev, p) * e_per_mm
        lines.append(f"G1 X{p[0]:.3f} Y{p[1]:.3f} E{e:.5f} F{feed:.0f}")
        prev = p
    return lines, e


def _square(cx: float, cy: float, half: float):
    return [(cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half),
            (cx - half, cy + half), (cx - half, cy - half)]


def _serpentine(x0, x1, y0, y1, spacing, horizontal: bool):
    """Back-and-forth infill pass endpoints."""
    runs = []
    if horizontal:
        n = max(int((y1 - y0) / spacing), 1)
        ys = y0 + spacing * np.arange(n + 1)
        for i, y in enumerate(ys):
            if y > y1 + 1e-9:
                break
            a, b = ((x0, y), (x1, y)) if i % 2 == 0 else ((x1, y), (x0, y))
            runs.append((a, b))
    else:
        n = max(int((x1 - x0) / spacing), 1)
        xs = x0 + spacing * np.arange(n + 1)
        for i, x in enumerate(xs):
            if x > x1 + 1e-9:
                break
            a, b = ((x, y0), (x, y1)) if i % 2 == 0 else ((x, y1), (x, y0))
            runs.append((a, b))
    return runs


def _program_text(outline_fn, layers: int, layer_height: float, line_width: float,
                  spacing: float, dense: bool, skirt_offset: float = 8.0) -> str:
    """Common fixture program body; outline_fn(inset) yields the outline
    loop at a given inward inset."""
    e_per_mm = 0.05
    lines = [
        "M140 S60",
        "M190 S60",
        "M104 S200",
        "M109 S200",
        "G28",
        "G90",
        "M82",
    ]
    e = 0.0
    for k in range(layers):
        z = (k + 1) * layer_height
        lines.append(f";LAYER:{k}")
        if k == 0:
            lines.append(";TYPE:SKIRT")
            loop, e = _loop_lines(outline_fn(-skirt_offset), z, 1800, e, e_per_mm)
            lines.extend(loop)
        lines.append(";TYPE:WALL-OUTER")
        loop, e = _loop_lines(outline_fn(0.0), z, 1500, e, e_per_mm)
        lines.extend(loop)
        lines.append(";TYPE:WALL-INNER")
        loop, e = _loop_lines(outline_fn(line_width), z, 1500, e, e_per_mm)
        lines.extend(loop)
        lines.append(";TYPE:FILL")
        # infill abuts the inner wall: pass centerlines 1.5 widths in, so
        # stroked material is contiguous with the wall band
        xs, ys = zip(*outline_fn(1.5 * line_width))
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
        # dense passes overlap a quarter width; raster stroke rounding
        # would otherwise leave hairline bed seams between passes
        step = 0.75 * line_width if dense else spacing
        for a, b in _serpentine(x0, x1, y0, y1, step, horizontal=(k % 2 == 0)):
            seg, e = _loop_lines([a, b], z, 1500, e, e_per_mm)
            lines.extend(seg)
    lines.extend(["M104 S0", "M140 S0", "G28"])
    return "\n".join(lines) + "\n"


def square_gcode(side: float = 40.0, layers: int = 12, layer_height: float = 0.2,
                 line_width: float = 0.4, spacing: float = 1.5,
                 center=(0.0, 0.0), dense: bool = False) -> str:
    """Square prism fixture. ``dense`` packs infill at line width for a
    solid top surface; otherwise passes sit ``spacing`` apart."""
    cx, cy = center

    def outline(inset: float):
        return _square(cx, cy, side / 2.0 - inset)

    return _program_text(outline, layers, layer_height, line_width, spacing, dense)


def octagon_gcode(layers: int = 6, layer_height: float = 0.2,
                  line_width: float = 0.4, spacing: float = 1.5,
                  dense: bool = False) -> str:
    """Irregular convex octagon; asymmetric so registration has a unique
    answer."""
    radii = (20.0, 16.0, 21.0, 15.0, 19.0, 14.0, 22.0, 17.0)
    angles = [math.radians(a) for a in (0, 45, 90, 135, 180, 225, 270, 315)]
    base = [(r * math.cos(a), r * math.sin(a)) for r, a in zip(radii, angles)]

    def outline(inset: float):
        shrink = [(x * (1.0 - inset / 20.0), y * (1.0 - inset / 20.0)) for x, y in base]
        return shrink + [shrink[0]]

    return _program_text(outline, layers, layer_height, line_width, spacing, dense)


# --- printer simulator -----------------------------------------------------------


class SimPrinter:
    """Line-protocol endpoint with modal state and scripted faults.

    Serves the write()/readline() channel contract. ``script`` maps a
    1-based command index to a fault: "error" answers Error:injected,
    "silent" never acknowledges, an integer n delays the ok by n polls.
    """

    def __init__(self, script: dict | None = None):
        self.script = dict(script or {})
        self.log = []
        self.nozzle_temp = 0.0
        self.bed_temp = 0.0
        self.feed_rate = 100.0
        self.position = {"X": 0.0, "Y": 0.0, "Z": 0.0}
        self.paused = False
        self._replies = deque()
        self._count = 0

    # channel interface ----------------------------------------------------

    def write(self, raw: str) -> None:
        for line in raw.splitlines():
            text = line.split(";", 1)[0].strip()
            if not text:
                continue
            self._count += 1
            self.log.append(text)
            self._apply(text)
            self._reply(text)

    def readline(self):
        if not self._replies:
            return None
        return self._replies.popleft()

    def close(self) -> None:
        pass

    # internals --------------------------------------------------------------

    def _apply(self, text: str) -> None:
        parts = text.split()
        op = parts[0]
        args = {}
        for tok in parts[1:]:
            try:
                args[tok[0].upper()] = float(tok[1:])
            except (ValueError, IndexError):
                pass
        if op in ("M104", "M109") and "S" in args:
            self.nozzle_temp = args["S"]
        elif op in ("M140", "M190") and "S" in args:
            self.bed_temp = args["S"]
        elif op == "M220" and "S" in args:
            self.feed_rate = args["S"]
        elif op in ("G0", "G1"):
            for axis in ("X", "Y", "Z"):
                if axis in args:
                    self.position[axis] = args[axis]
        elif op == "G28":
            self.position = {"X": 0.0, "Y": 0.0, "Z": 0.0}
        elif op == "M0":
            self.paused = True
        elif op == "M108":
            self.paused = False

    def _reply(self, text: str) -> None:
        fault = self.script.get(self._count)
        if fault == "silent":
            return
        if fault == "error":
            self._replies.append("Error:injected\n")
            return
        if isinstance(fault, int):
            self._replies.extend([None] * fault)
        if text.split()[0] == "M105":
            self._replies.append(
                f"T:{self.nozzle_temp:.1f} /{self.nozzle_temp:.1f} "
                f"B:{self.bed_temp:.1f} /{self.bed_temp:.1f}\n"
            )
        self._replies.append("ok\n")


def sim_printer(script: dict | None = None) -> SimPrinter:
    return SimPrinter(script)
