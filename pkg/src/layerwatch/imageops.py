"""Raster utilities shared by the view, registration, and texture stages.

Images are numpy arrays, row-major, y down. Grayscale is float unless a
function says otherwise; 8-bit only at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

__all__ = [
    "to_gray",
    "to_uint8",
    "gaussian_smooth",
    "gradient_xy",
    "canny_edges",
    "hysteresis_mask",
    "resize_bilinear",
    "sample_bilinear",
    "stroke_paths",
    "fill_polygon",
    "disk",
    "binary_close",
    "binary_dilate",
    "binary_erode",
    "resize_nearest",
    "Region",
    "regions",
    "load_gray",
    "save_gray",
]


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float grayscale in [0, 255] from uint8/float gray or RGB(A)."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[..., :3].astype(float) @ np.array([0.299, 0.587, 0.114])
    return arr.astype(float)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image.astype(float), sigma, mode="nearest")


def gradient_xy(image: np.ndarray):
    """Sobel derivatives (gx, gy); y increases downward."""
    gx = ndimage.sobel(image, axis=1, mode="nearest")
    gy = ndimage.sobel(image, axis=0, mode="nearest")
    return gx, gy


def hysteresis_mask(strength: np.ndarray, high: float, low: float) -> np.ndarray:
    """Keep weak responses only where connected to a strong one."""
    strong = strength >= high
    weak = strength >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(strong)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_edges(
    image: np.ndarray,
    sigma: float = 1.4,
    high_frac: float = 0.2,
    low_frac: float = 0.08,
) -> np.ndarray:
    """Gradient edges with non-maximum suppression and hysteresis.

    Thresholds are fractions of the maximum gradient magnitude, so the
    result is invariant to affine intensity changes of the input.
    """
    smooth = gaussian_smooth(to_gray(image), sigma)
    gx, gy = gradient_xy(smooth)
    mag = np.hypot(gx, gy)
    if mag.max() <= 0:
        return np.zeros(image.shape[:2], dtype=bool)

    # quantize gradient direction into 4 sectors and suppress non-maxima
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    nms = np.zeros_like(mag)
    padded = np.pad(mag, 1, mode="constant")
    for s, (dy, dx) in offsets.items():
        sel = sector == s
        fwd = padded[1 + dy : 1 + dy + mag.shape[0], 1 + dx : 1 + dx + mag.shape[1]]
        bwd = padded[1 - dy : 1 - dy + mag.shape[0], 1 - dx : 1 - dx + mag.shape[1]]
        ok = sel & (mag >= fwd) & (mag >= bwd)
        nms[ok] = mag[ok]

    peak = mag.max()
    return hysteresis_mask(nms, high_frac * peak, low_frac * peak)


def resize_bilinear(image: np.ndarray, shape: tuple) -> np.ndarray:
    """Resize to (rows, cols) sampling at pixel centers."""
    rows, cols = shape
    src = image.astype(float)
    ry = src.shape[0] / rows
    rx = src.shape[1] / cols
    yy = (np.arange(rows) + 0.5) * ry - 0.5
    xx = (np.arange(cols) + 0.5) * rx - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(src, grid, order=1, mode="nearest")


def sample_bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float (row, col) positions; outside = 0."""
    return ndimage.map_coordinates(
        image.astype(float), [rows, cols], order=1, mode="constant", cval=0.0
    )


def stroke_paths(
    shape: tuple,
    paths,
    width_px: float,
    value: int = 255,
    base: np.ndarray | None = None,
) -> np.ndarray:
    """Draw polylines (pixel coordinates, (x, y) vertex order) with round joints."""
    if base is not None:
        img = Image.fromarray(to_uint8(base))
    else:
        img = Image.new("L", (shape[1], shape[0]), 0)
    draw = ImageDraw.Draw(img)
    w = max(int(round(width_px)), 1)
    r = w / 2.0
    for path in paths:
        pts = [(float(x), float(y)) for x, y in path]
        if len(pts) == 1:
            x, y = pts[0]
            draw.ellipse([x - r, y - r, x + r, y + r], fill=value)
            continue
        draw.line(pts, fill=value, width=w, joint="curve")
        for x, y in (pts[0], pts[-1]):
            draw.ellipse([x - r, y - r, x + r, y + r], fill=value)
    return np.asarray(img)


def fill_polygon(shape: tuple, polygon, value: int = 255, base: np.ndarray | None = None) -> np.ndarray:
    """Fill a polygon given in pixel (x, y) coordinates."""
    if base is not None:
        img = Image.fromarray(to_uint8(base))
    else:
        img = Image.new("L", (shape[1], shape[0]), 0)
    draw = ImageDraw.Draw(img)
    draw.polygon([(float(x), float(y)) for x, y in polygon], fill=value)
    return np.asarray(img)


def disk(radius: float) -> np.ndarray:
    r = max(int(round(radius)), 1)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def binary_close(mask: np.ndarray, radius: float) -> np.ndarray:
    structure = disk(radius)
    # pad so closing is not clipped at the borders
    r = structure.shape[0] // 2
    padded = np.pad(mask.astype(bool), r, mode="constant")
    closed = ndimage.binary_closing(padded, structure=structure)
    return closed[r:-r, r:-r]


def binary_dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    return ndimage.binary_dilation(mask.astype(bool), structure=disk(radius))


def binary_erode(mask: np.ndarray, radius: float) -> np.ndarray:
    return ndimage.binary_erosion(mask.astype(bool), structure=disk(radius))


def resize_nearest(mask: np.ndarray, shape: tuple) -> np.ndarray:
    """Resize a label/boolean raster without interpolating values."""
    rows, cols = shape
    ry = mask.shape[0] / rows
    rx = mask.shape[1] / cols
    yy = np.minimum(((np.arange(rows) + 0.5) * ry).astype(int), mask.shape[0] - 1)
    xx = np.minimum(((np.arange(cols) + 0.5) * rx).astype(int), mask.shape[1] - 1)
    return mask[np.ix_(yy, xx)]


@dataclass
class Region:
    """One connected component of a binary raster."""

    label: int
    area: int
    centroid: tuple  # (row, col)
    bbox: tuple  # (row0, col0, row1, col1), exclusive stop
    mask: np.ndarray  # full-size boolean

    @property
    def elongation(self) -> float:
        """Major/minor axis ratio from coordinate second moments."""
        ys, xs = np.nonzero(self.mask)
        if len(ys) < 2:
            return 1.0
        coords = np.stack([ys, xs]).astype(float)
        cov = np.cov(coords)
        eigvals = np.sort(np.linalg.eigvalsh(cov))
        minor = max(eigvals[0], 1.0 / 12.0)  # single-pixel row variance
        return float(np.sqrt(eigvals[1] / minor))


def regions(mask: np.ndarray, connectivity: int = 2) -> list:
    structure = np.ones((3, 3), dtype=int) if connectivity == 2 else None
    labels, n = ndimage.label(mask, structure=structure)
    out = []
    slices = ndimage.find_objects(labels)
    for i, sl in enumerate(slices, start=1):
        if sl is None:
            continue
        comp = labels == i
        ys, xs = np.nonzero(comp)
        out.append(
            Region(
                label=i,
                area=int(comp.sum()),
                centroid=(float(ys.mean()), float(xs.mean())),
                bbox=(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop),
                mask=comp,
            )
        )
    return out


def load_gray(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def save_gray(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="L").save(path)
