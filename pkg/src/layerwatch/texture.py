"""Infill texture analysis.

Pixels are lifted into a 48-dimensional space of oriented filter
responses, clustered with a diagonal-covariance Gaussian mixture, and
the non-dominant clusters inside the infill mask are grouped into
defect regions. A layer is defective when those regions cover more
than a threshold share of the infill area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import logsumexp

from .gcode import Layer, PathCategory
from .imageops import (
    binary_close,
    binary_erode,
    fill_polygon,
    regions,
    resize_bilinear,
    resize_nearest,
    stroke_paths,
)

__all__ = [
    "TextureError",
    "BankError",
    "SizeError",
    "FitError",
    "FilterBank",
    "ResponseField",
    "GMMModel",
    "AnomalyRegion",
    "DefectGroup",
    "AnomalyReport",
    "build_lm_filterbank",
    "filter_responses",
    "fit_gmm",
    "segment",
    "infill_mask",
    "detect_anomalies",
    "cluster_anomalies_ahc",
    "analyze_texture",
]

ANALYSIS_SIZE = 150       # texture crop edge, px
KERNEL_SIZE = 49          # filter support at the 150 px crop
DEFECT_THRESHOLD = 0.15   # defective when anomalies exceed this mask share
MIN_REGION_AREA = 25      # px, noise floor
ELONGATION_LIMIT = 10.0   # regions thinner than 1:10 are treated as bleed-in
MERGE_DIAG_FRACTION = 0.2
FRAG_COUNT = 8            # a label in this many surviving pieces, all small,
FRAG_FRACTION = 0.03      # is periodic texture, not a defect
HALO_PX = 10.0            # label bleed past a sharp texture edge, at crop scale
VARIANCE_FLOOR = 1e-6
DEFAULT_COMPONENTS = 6
EM_RESTARTS = 3

N_ORIENT = 6
DERIV_SIGMAS = (1.0, math.sqrt(2.0), 2.0)
BLUR_SIGMAS = (1.0, math.sqrt(2.0), 2.0, 2.0 * math.sqrt(2.0))
ELONGATION = 3.0
DOG_OUTER_RATIO = 3.0


class TextureError(RuntimeError):
    pass


class BankError(TextureError):
    pass


class SizeError(TextureError):
    pass


class FitError(TextureError):
    pass


# --- filter bank -------------------------------------------------------------


@dataclass(frozen=True)
class KernelInfo:
    family: str        # "first_deriv" | "second_deriv" | "dog" | "gaussian"
    orientation: float | None  # radians, None for isotropic kernels
    sigma: float       # px at the built size


@dataclass(frozen=True)
class FilterBank:
    kernels: np.ndarray  # (48, size, size)
    size: int
    info: tuple

    def __post_init__(self):
        if self.kernels.shape != (48, self.size, self.size):
            raise BankError("bank must hold 48 kernels at the declared size")


def _gauss(x: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * (x / sigma) ** 2)


def _oriented_kernel(grid, sigma: float, theta: float, order: int) -> np.ndarray:
    """Derivative-of-Gaussian bar/edge kernel: differentiated across the
    stroke (scale sigma), smoothed along it (3x elongation)."""
    x, y = grid
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    g_u = _gauss(u, sigma)
    if order == 1:
        core = -u / sigma**2 * g_u
    else:
        core = (u**2 / sigma**4 - 1.0 / sigma**2) * g_u
    return core * _gauss(v, ELONGATION * sigma)


def build_lm_filterbank(size: int = KERNEL_SIZE) -> FilterBank:
    """48 kernels: 36 elongated derivatives (6 orientations x 3 scales,
    first and second order), 8 difference-of-Gaussians, 4 Gaussians.

    Scales are stated for a 49 px support and stretched linearly for
    other sizes. Derivative and DoG kernels are zero-mean to 1e-9; every
    kernel is L1-normalized.
    """
    if size < 7 or size % 2 == 0:
        raise BankError("kernel size must be odd and at least 7")
    unit = size / 49.0
    half = size // 2
    coords = np.arange(size, dtype=np.float64) - half
    x, y = np.meshgrid(coords, coords)  # x: column offset, y: row offset
    grid = (x, y)

    kernels = []
    info = []

    for order, family in ((1, "first_deriv"), (2, "second_deriv")):
        for sigma in DERIV_SIGMAS:
            for i in range(N_ORIENT):
                theta = i * math.pi / N_ORIENT
                k = _oriented_kernel(grid, sigma * unit, theta, order)
                kernels.append(k)
                info.append(KernelInfo(family, theta, sigma * unit))

    dog_sigmas = tuple(BLUR_SIGMAS) + tuple(DOG_OUTER_RATIO * s for s in BLUR_SIGMAS)
    for sigma in dog_sigmas:
        s = sigma * unit
        inner = _gauss(x, s) * _gauss(y, s)
        outer = _gauss(x, DOG_OUTER_RATIO * s) * _gauss(y, DOG_OUTER_RATIO * s)
        k = inner / inner.sum() - outer / outer.sum()
        kernels.append(k)
        info.append(KernelInfo("dog", None, s))

    for sigma in BLUR_SIGMAS:
        s = sigma * unit
        k = _gauss(x, s) * _gauss(y, s)
        kernels.append(k)
        info.append(KernelInfo("gaussian", None, s))

    out = np.empty((48, size, size))
    for i, k in enumerate(kernels):
        if info[i].family != "gaussian":
            k = k - k.mean()  # kill the DC leak from truncation
        out[i] = k / np.abs(k).sum()
        if info[i].family != "gaussian":
            out[i] -= out[i].mean()

    return FilterBank(kernels=out, size=size, info=tuple(info))


@dataclass(frozen=True)
class ResponseField:
    vectors: np.ndarray  # (H, W, n_kernels)

    def __post_init__(self):
        if self.vectors.ndim != 3:
            raise SizeError("response field must be H x W x channels")
        if not np.all(np.isfinite(self.vectors)):
            raise SizeError("non-finite filter responses")

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def channels(self) -> int:
        return self.vectors.shape[2]


def filter_responses(image: np.ndarray, bank: FilterBank) -> ResponseField:
    """Convolve (true convolution, reflect padding) with every kernel.

    The input is normalized to zero mean and unit variance first, which
    makes the downstream segmentation invariant to global affine
    intensity changes.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise SizeError("expected a single-channel image")
    if img.shape[0] < bank.size or img.shape[1] < bank.size:
        raise SizeError("image smaller than the filter support")
    std = img.std()
    norm = (img - img.mean()) / (std if std > 0 else 1.0)

    half = bank.size // 2
    padded = np.pad(norm, half, mode="reflect")
    stack = fftconvolve(padded[None, :, :], bank.kernels, mode="valid", axes=(1, 2))
    return ResponseField(vectors=np.ascontiguousarray(np.moveaxis(stack, 0, 2)))


# --- Gaussian mixture --------------------------------------------------------


@dataclass(frozen=True)
class GMMModel:
    weights: np.ndarray    # (k,)
    means: np.ndarray      # (k, d)
    variances: np.ndarray  # (k, d) diagonal covariances
    loglik_history: tuple = ()
    converged: bool = False
    reseeds: int = 0

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise FitError("mixture weights must be positive and sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR - 1e-12):
            raise FitError("variance below floor")

    @property
    def k(self) -> int:
        return len(self.weights)


def _as_samples(field) -> np.ndarray:
    if isinstance(field, ResponseField):
        return field.vectors.reshape(-1, field.channels)
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim == 3:
        return arr.reshape(-1, arr.shape[2])
    if arr.ndim == 2:
        return arr
    raise FitError("expected a response field or an (n, d) sample array")


def _log_gauss_diag(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # (n, k): log N(x | mu_j, diag(var_j))
    n, d = x.shape
    out = np.empty((n, len(means)))
    for j in range(len(means)):
        diff2 = (x - means[j]) ** 2
        out[:, j] = -0.5 * (
            d * math.log(2.0 * math.pi)
            + np.log(variances[j]).sum()
            + (diff2 / variances[j]).sum(axis=1)
        )
    return out


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
            continue
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def fit_gmm(field, k: int = DEFAULT_COMPONENTS, seed: int = 0,
            max_iter: int = 200, tol: float = 1e-5, mask=None) -> GMMModel:
    """Diagonal-covariance EM with a k-means++-style seeded start.

    Stops when the relative log-likelihood gain drops below tol. A
    collapsing component (vanishing weight or degenerate variance) is
    re-seeded at a random sample once; afterwards the variance floor
    keeps it alive. The per-iteration log-likelihood trace is kept on
    the model.
    """
    x = _as_samples(field)
    if mask is not None:
        x = x[np.asarray(mask, dtype=bool).reshape(-1)]
    n = len(x)
    if k < 1:
        raise FitError("k must be at least 1")
    if n < 10 * k:
        raise FitError(f"{n} samples is too few for k={k}")
    if not np.all(np.isfinite(x)):
        raise FitError("non-finite samples")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_centers(x, k, rng)

    # hard assignment to the seeds gives the initial moments
    d2 = np.empty((n, k))
    for j in range(k):
        d2[:, j] = ((x - centers[j]) ** 2).sum(axis=1)
    assign = d2.argmin(axis=1)
    weights = np.empty(k)
    means = np.empty((k, x.shape[1]))
    variances = np.empty((k, x.shape[1]))
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    for j in range(k):
        sel = x[assign == j]
        weights[j] = max(len(sel), 1) / n
        means[j] = sel.mean(axis=0) if len(sel) else centers[j]
        variances[j] = np.maximum(sel.var(axis=0), VARIANCE_FLOOR) if len(sel) > 1 else global_var
    weights /= weights.sum()

    history = []
    converged = False
    reseeded = np.zeros(k, dtype=bool)
    reseeds = 0
    for _ in range(max_iter):
        log_prob = _log_gauss_diag(x, means, variances) + np.log(weights)
        log_norm = logsumexp(log_prob, axis=1)
        loglik = float(log_norm.sum())
        resp = np.exp(log_prob - log_norm[:, None])

        nk = resp.sum(axis=0)
        collapsed = np.flatnonzero(nk < 1e-8 * n)
        if len(collapsed):
            for j in collapsed:
                if reseeded[j]:
                    continue
                means[j] = x[rng.integers(n)]
                variances[j] = global_var
                weights[j] = max(weights[j], 1.0 / n)
                weights = weights / weights.sum()
                reseeded[j] = True
                reseeds += 1
            # a reseed restarts the ascent; the recorded trace covers the
            # final segment so it stays monotone
            history = []
            continue

        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        sq = (resp.T @ (x * x)) / nk[:, None]
        variances = np.maximum(sq - means**2, VARIANCE_FLOOR)

        history.append(loglik)
        if len(history) > 1:
            prev = history[-2]
            gain = loglik - prev
            if gain < tol * max(abs(prev), 1.0):
                converged = True
                break

    return GMMModel(
        weights=weights / weights.sum(),
        means=means,
        variances=variances,
        loglik_history=tuple(history),
        converged=converged,
        reseeds=reseeds,
    )


def segment(field, model: GMMModel) -> np.ndarray:
    """Per-pixel argmax of posterior responsibility; ties go to the
    lowest component index."""
    if isinstance(field, ResponseField):
        shape = (field.height, field.width)
        x = field.vectors.reshape(-1, field.channels)
    else:
        arr = np.asarray(field, dtype=np.float64)
        shape = arr.shape[:2]
        x = arr.reshape(-1, arr.shape[2])
    if x.shape[1] != model.means.shape[1]:
        raise FitError("model dimensionality does not match the field")
    log_prob = _log_gauss_diag(x, model.means, model.variances) + np.log(model.weights)
    return log_prob.argmax(axis=1).reshape(shape).astype(np.int32)


# --- infill mask -------------------------------------------------------------


def _estimate_line_spacing(segs, default_mm: float = 2.0) -> float:
    """Median center-to-center gap between parallel infill passes, from
    segment midpoints projected on the dominant stroke normal."""
    if len(segs) < 3:
        return default_mm
    vecs = np.array([np.asarray(s.end) - np.asarray(s.start) for s in segs])
    lengths = np.hypot(vecs[:, 0], vecs[:, 1])
    keep = lengths > 1e-9
    if keep.sum() < 3:
        return default_mm
    kept_segs = [s for s, ok in zip(segs, keep) if ok]
    vecs, lengths = vecs[keep], lengths[keep]
    angles = np.mod(np.arctan2(vecs[:, 1], vecs[:, 0]), math.pi)
    bins = np.round(angles / (math.pi / 36)).astype(int) % 36
    dominant = np.bincount(bins, weights=lengths, minlength=36).argmax()
    sel = bins == dominant
    if sel.sum() < 3:
        return default_mm
    theta = math.pi * dominant / 36
    normal = np.array([-math.sin(theta), math.cos(theta)])
    mids = np.array(
        [(np.asarray(s.start) + np.asarray(s.end)) / 2.0 for s, ok in zip(kept_segs, sel) if ok]
    )
    proj = np.sort(mids @ normal)
    gaps = np.diff(proj)
    gaps = gaps[gaps > 0.05]
    if len(gaps) == 0:
        return default_mm
    return float(np.median(gaps))


def infill_mask(layer: Layer, view) -> np.ndarray:
    """Filled infill region in view pixels.

    Infill passes are stroked at line width and morphologically closed
    at the estimated line spacing, then clipped to the outline interior
    minus a wall-width margin so shell pixels never enter the texture
    statistics. No infill yields an empty mask.
    """
    from .gcode import layer_outline

    shape = view.shape
    infill = layer.segments_of(PathCategory.INFILL)
    if not infill:
        return np.zeros(shape, dtype=bool)

    ppm = view.px_per_mm
    width_px = max(layer.params.line_width * ppm, 1.0)
    paths = [view.world_to_px([s.start, s.end]) for s in infill]
    stroked = stroke_paths(shape, paths, width_px=width_px) > 0

    spacing_px = _estimate_line_spacing(infill) * ppm
    closed = binary_close(stroked, radius=max(spacing_px, 1.0))

    margin_px = max(1.5 * layer.params.line_width * ppm, 1.0)
    try:
        loops = layer_outline(layer)
    except Exception:
        return closed
    interior = np.zeros(shape, dtype=bool)
    for loop in loops:
        interior |= fill_polygon(shape, view.world_to_px(loop)) > 0
    interior = binary_erode(interior, radius=margin_px)
    return closed & interior


# --- anomaly detection -------------------------------------------------------


@dataclass(frozen=True)
class AnomalyRegion:
    mask: np.ndarray       # full-size boolean raster
    area: int
    fraction: float        # of the infill mask
    centroid: tuple        # (row, col)
    bbox: tuple            # (r0, c0, r1, c1), exclusive stop
    elongation: float
    touches_border: bool
    intensity_delta: float  # mean gray vs the dominant texture; 0 if unknown


@dataclass(frozen=True)
class DefectGroup:
    regions: tuple
    fraction: float
    centroid: tuple        # area-weighted (row, col)
    bbox: tuple
    intensity_delta: float
    touches_border: bool


@dataclass(frozen=True)
class AnomalyReport:
    label_image: np.ndarray | None
    infill_mask: np.ndarray | None
    anomaly_regions: tuple
    defect_groups: tuple
    defective: bool
    anomaly_fraction: float
    threshold: float = DEFECT_THRESHOLD
    crop_bbox: tuple | None = None  # (r0, c0, r1, c1) of the crop in view px
    model: GMMModel | None = None

    @staticmethod
    def empty() -> "AnomalyReport":
        return AnomalyReport(
            label_image=None,
            infill_mask=None,
            anomaly_regions=(),
            defect_groups=(),
            defective=False,
            anomaly_fraction=0.0,
        )


def detect_anomalies(labels: np.ndarray, mask: np.ndarray,
                     threshold: float = DEFECT_THRESHOLD,
                     image: np.ndarray | None = None,
                     min_area: int = MIN_REGION_AREA,
                     elongation_limit: float = ELONGATION_LIMIT,
                     frag_count: int = FRAG_COUNT,
                     frag_fraction: float = FRAG_FRACTION) -> AnomalyReport:
    """Flag non-dominant-label regions inside the mask.

    The most common label inside the mask is taken as the normal infill
    texture and each remaining label is split into connected components.
    Components are dropped when they sit under the noise floor or are
    thin slivers along the mask border (bleed-in from walls); a label
    whose surviving components are all small and numerous is the
    periodic structure of healthy infill wearing several cluster ids,
    so it is discarded wholesale rather than per component. The layer
    is defective when the kept regions together exceed the threshold
    share of the mask; defective layers get their regions grouped for
    reporting.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if labels.shape != mask.shape:
        raise SizeError("labels and mask must have the same shape")
    mask_area = int(mask.sum())
    if mask_area == 0:
        return AnomalyReport.empty()

    inside = labels[mask]
    dominant = int(np.bincount(inside).argmax())

    border_band = mask & ~binary_erode(mask, radius=2)
    dominant_mean = None
    if image is not None:
        dom_pixels = np.asarray(image, dtype=np.float64)[mask & (labels == dominant)]
        if len(dom_pixels):
            dominant_mean = float(dom_pixels.mean())

    kept = []
    for lab in np.unique(inside):
        if lab == dominant:
            continue
        survivors = []
        for reg in regions(mask & (labels == lab)):
            if reg.area < min_area:
                continue
            touches = bool((reg.mask & border_band).any())
            if reg.elongation > elongation_limit and touches:
                continue
            survivors.append((reg, touches))
        if len(survivors) >= frag_count and all(
            reg.area < frag_fraction * mask_area for reg, _ in survivors
        ):
            continue
        for reg, touches in survivors:
            delta = 0.0
            if dominant_mean is not None:
                delta = float(
                    np.asarray(image, dtype=np.float64)[reg.mask].mean() - dominant_mean
                )
            kept.append(
                AnomalyRegion(
                    mask=reg.mask,
                    area=reg.area,
                    fraction=reg.area / mask_area,
                    centroid=reg.centroid,
                    bbox=reg.bbox,
                    elongation=reg.elongation,
                    touches_border=touches,
                    intensity_delta=delta,
                )
            )

    fraction = sum(r.fraction for r in kept)
    defective = fraction > threshold
    groups = ()
    if defective and kept:
        diag = math.hypot(*mask.shape)
        groups = cluster_anomalies_ahc(tuple(kept), diag)

    return AnomalyReport(
        label_image=labels,
        infill_mask=mask,
        anomaly_regions=tuple(kept),
        defect_groups=groups,
        defective=defective,
        anomaly_fraction=fraction,
    )


def cluster_anomalies_ahc(anomaly_regions, mask_diagonal: float,
                          merge_fraction: float = MERGE_DIAG_FRACTION) -> tuple:
    """Centroid-linkage agglomeration of anomaly regions into defect
    groups: merge closest centroids until two clusters remain, then
    collapse to one when they sit closer than the merge fraction of the
    mask diagonal."""
    if not anomaly_regions:
        return ()
    clusters = [[r] for r in anomaly_regions]

    def centroid(cluster):
        w = np.array([r.area for r in cluster], dtype=np.float64)
        pts = np.array([r.centroid for r in cluster])
        return (w[:, None] * pts).sum(axis=0) / w.sum()

    while len(clusters) > 2:
        cents = [centroid(c) for c in clusters]
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = float(np.hypot(*(cents[i] - cents[j])))
                if best is None or d < best[0]:
                    best = (d, i, j)
        _, i, j = best
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]

    if len(clusters) == 2:
        d = float(np.hypot(*(centroid(clusters[0]) - centroid(clusters[1]))))
        if d < merge_fraction * mask_diagonal:
            clusters = [clusters[0] + clusters[1]]

    groups = []
    for cluster in clusters:
        boxes = np.array([r.bbox for r in cluster])
        bbox = (
            int(boxes[:, 0].min()),
            int(boxes[:, 1].min()),
            int(boxes[:, 2].max()),
            int(boxes[:, 3].max()),
        )
        total_area = sum(r.area for r in cluster)
        delta = sum(r.intensity_delta * r.area for r in cluster) / total_area
        groups.append(
            DefectGroup(
                regions=tuple(cluster),
                fraction=sum(r.fraction for r in cluster),
                centroid=tuple(float(v) for v in centroid(cluster)),
                bbox=bbox,
                intensity_delta=float(delta),
                touches_border=any(r.touches_border for r in cluster),
            )
        )
    groups.sort(key=lambda g: -g.fraction)
    return tuple(groups)


# --- driver ------------------------------------------------------------------


def analyze_texture(image: np.ndarray, layer: Layer, view, *,
                    k: int = DEFAULT_COMPONENTS, seed: int = 0,
                    kernel_size: int = KERNEL_SIZE,
                    threshold: float = DEFECT_THRESHOLD,
                    restarts: int = EM_RESTARTS,
                    halo_px: float = HALO_PX) -> AnomalyReport:
    """Full texture stage for one layer's rectified top view.

    Crops the infill bounding box, rescales to the analysis size (so the
    filter support is a third of the crop), clusters the filter
    responses, and reports anomalies inside the infill mask. The mixture
    is fitted from several seeds and the best likelihood wins, which
    irons out the occasional degenerate local optimum. Region areas are
    measured per defect group after eroding the group by the halo the
    filter support smears around a sharp texture edge; without that the
    measured share of a real defect overshoots by the halo band. The
    crop bbox is kept on the report for mapping results back to view
    pixels.
    """
    mask_full = infill_mask(layer, view)
    if not mask_full.any():
        return AnomalyReport.empty()

    rows = np.flatnonzero(mask_full.any(axis=1))
    cols = np.flatnonzero(mask_full.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    pad = max(2, kernel_size // 8)
    r0, c0 = max(r0 - pad, 0), max(c0 - pad, 0)
    r1 = min(r1 + pad, mask_full.shape[0] - 1)
    c1 = min(c1 + pad, mask_full.shape[1] - 1)

    crop = np.asarray(image, dtype=np.float64)[r0 : r1 + 1, c0 : c1 + 1]
    crop_mask = mask_full[r0 : r1 + 1, c0 : c1 + 1]
    crop = resize_bilinear(crop, (ANALYSIS_SIZE, ANALYSIS_SIZE))
    crop_mask = resize_nearest(crop_mask, (ANALYSIS_SIZE, ANALYSIS_SIZE))
    if not crop_mask.any():
        return AnomalyReport.empty()

    bank = build_lm_filterbank(kernel_size)
    field = filter_responses(crop, bank)
    model = None
    for attempt in range(max(restarts, 1)):
        cand = fit_gmm(field, k=k, seed=seed + attempt * 1000003)
        if model is None or cand.loglik_history[-1] > model.loglik_history[-1]:
            model = cand
    labels = segment(field, model)
    raw = detect_anomalies(labels, crop_mask, threshold=threshold, image=crop)

    groups = cluster_anomalies_ahc(raw.anomaly_regions, math.hypot(*crop_mask.shape))
    mask_area = int(crop_mask.sum())
    compensated = []
    fraction = 0.0
    for group in groups:
        union = np.zeros(crop_mask.shape, dtype=bool)
        for reg in group.regions:
            union |= reg.mask
        core = binary_erode(union, radius=halo_px) if halo_px > 0 else union
        gfrac = float(core.sum()) / mask_area
        fraction += gfrac
        compensated.append(replace(group, fraction=gfrac))
    compensated.sort(key=lambda g: -g.fraction)

    return AnomalyReport(
        label_image=raw.label_image,
        infill_mask=raw.infill_mask,
        anomaly_regions=raw.anomaly_regions,
        defect_groups=tuple(compensated),
        defective=fraction > threshold,
        anomaly_fraction=fraction,
        threshold=threshold,
        crop_bbox=(r0, c0, r1 + 1, c1 + 1),
        model=model,
    )
