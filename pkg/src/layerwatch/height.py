"""Vertical level validation from the unwrapped side band.

The band's top edge is traced per column, converted to millimeters, and
compared with the expected print height. Verdicts follow two tolerance
rules: a one-off excess of one layer height is only a warning, repeated
or doubled excesses fail the layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .imageops import hysteresis_mask
from .projection import PlaneView

__all__ = [
    "HeightError",
    "EdgeNotFound",
    "HeightState",
    "HeightProfile",
    "HeightStats",
    "extract_top_edge",
    "height_stats",
    "height_verdict",
]

EDGE_SIGMA = 1.4
EDGE_HIGH = 0.2
EDGE_LOW = 0.08
CONSECUTIVE_LIMIT = 2


class HeightError(ValueError):
    pass


class EdgeNotFound(HeightError):
    pass


class HeightState(Enum):
    OK = "ok"
    WARNING = "warning"
    FAILURE = "failure"


@dataclass(frozen=True)
class HeightProfile:
    per_column_height: np.ndarray  # mm, one entry per band column
    reference_height: float  # mm, expected print height after this layer
    layer_height: float  # mm

    def __post_init__(self):
        h = np.asarray(self.per_column_height, dtype=float)
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise HeightError("heights must be finite and non-negative")
        object.__setattr__(self, "per_column_height", h)


@dataclass(frozen=True)
class HeightStats:
    mean_error: float  # mm, signed
    total_error: float  # mm, mean absolute per-column error
    max_abs_error: float  # mm

    def __post_init__(self):
        vals = (self.mean_error, self.total_error, self.max_abs_error)
        if not all(np.isfinite(v) for v in vals):
            raise HeightError("stats must be finite")
        if self.max_abs_error + 1e-12 < abs(self.mean_error):
            raise HeightError("max error below mean error")


def extract_top_edge(
    side_view: PlaneView,
    reference_height: float,
    layer_height: float,
) -> HeightProfile:
    """Trace the material's top edge across the side band.

    Per column the edge is the topmost surviving row of the
    hysteresis-thresholded vertical gradient (smoothed at sigma 1.4,
    thresholds 0.2/0.08 of the maximum). Columns without an edge read as
    height 0; if more than half the columns lack one the band is
    considered unreadable.
    """
    img = side_view.image.astype(float)
    if img.size == 0:
        raise EdgeNotFound("empty side view")
    # smooth each column on its own: adjacent columns are unrelated arc
    # positions, and cross-column blur would bridge narrow defects
    smooth = ndimage.gaussian_filter1d(img, EDGE_SIGMA, axis=0, mode="nearest")
    grad = np.abs(np.gradient(smooth, axis=0))
    peak = grad.max()
    if peak <= 0:
        raise EdgeNotFound("no vertical gradient in the side view")
    mask = hysteresis_mask(grad, EDGE_HIGH * peak, EDGE_LOW * peak)

    rows, cols = img.shape
    heights = np.zeros(cols)
    missing = 0
    for c in range(cols):
        on = np.nonzero(mask[:, c])[0]
        if len(on) == 0:
            missing += 1
            continue
        # topmost contiguous run, then the strongest gradient within it
        top = on[0]
        run_end = top
        for r in on[1:]:
            if r == run_end + 1:
                run_end = r
            else:
                break
        run = np.arange(top, run_end + 1)
        edge_row = run[np.argmax(grad[run, c])]
        heights[c] = max(side_view.plane_z - edge_row / side_view.px_per_mm, 0.0)

    if missing > 0.5 * cols:
        raise EdgeNotFound(f"no edge in {missing}/{cols} columns")
    return HeightProfile(
        per_column_height=heights,
        reference_height=reference_height,
        layer_height=layer_height,
    )


def height_stats(profile: HeightProfile) -> HeightStats:
    """Signed mean, mean absolute, and peak per-column height error."""
    err = profile.per_column_height - profile.reference_height
    if err.size == 0:
        raise HeightError("empty profile")
    return HeightStats(
        mean_error=float(err.mean()),
        total_error=float(np.abs(err).mean()),
        max_abs_error=float(np.abs(err).max()),
    )


def _exceeds(stats: HeightStats, limit: float) -> bool:
    return abs(stats.mean_error) > limit or stats.total_error > limit


def height_verdict(history, layer_height: float, warn_mult: float = 1.0,
                   fail_mult: float = 2.0) -> HeightState:
    """Tolerance rules over the per-layer stats history (oldest first).

    A single excess of one layer height is tolerated as a warning; the
    same excess on consecutive layers, or any excess of two layer
    heights, is a failure. The multiples are configurable but default to
    those rules.
    """
    if warn_mult <= 0 or fail_mult <= 0:
        raise HeightError("tolerance multiples must be positive")
    history = list(history)
    if not history:
        raise HeightError("empty history")
    latest = history[-1]
    if _exceeds(latest, fail_mult * layer_height):
        return HeightState.FAILURE
    recent = history[-CONSECUTIVE_LIMIT:]
    if len(recent) >= CONSECUTIVE_LIMIT and all(
        s.total_error > warn_mult * layer_height for s in recent
    ):
        return HeightState.FAILURE
    if _exceeds(latest, warn_mult * layer_height):
        return HeightState.WARNING
    return HeightState.OK
