from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerwatch.height import (
    EdgeNotFound,
    HeightError,
    HeightProfile,
    HeightState,
    HeightStats,
    extract_top_edge,
    height_stats,
    height_verdict,
)
from layerwatch.projection import PlaneView

PPM = 10.0


def _band(heights, z_max: float, ppm: float = PPM,
          bright: int = 200, dark: int = 20) -> PlaneView:
    """Synthetic side band: column c is material up to heights[c] mm
    (None leaves the column blank)."""
    cols = len(heights)
    rows = int(round(z_max * ppm)) + 1
    img = np.full((rows, cols), dark, dtype=float)
    for c, h in enumerate(heights):
        if h is None:
            continue
        r0 = int(round((z_max - h) * ppm))
        img[r0:, c] = bright
    return PlaneView(image=img.astype(np.uint8), px_per_mm=ppm,
                     origin=(0.0, 0.0), plane_z=z_max)


def _stats(mean: float, total: float) -> HeightStats:
    return HeightStats(mean_error=mean, total_error=total,
                       max_abs_error=max(abs(mean), total))


def test_filled_band_reads_the_true_height_within_one_pixel():
    profile = extract_top_edge(_band([2.0] * 40, 2.4), 2.0, 0.2)
    assert np.all(np.abs(profile.per_column_height - 2.0) <= 1.0 / PPM + 1e-9)


def test_blank_band_raises_edge_not_found():
    view = PlaneView(image=np.zeros((25, 40), dtype=np.uint8),
                     px_per_mm=PPM, origin=(0.0, 0.0), plane_z=2.4)
    with pytest.raises(EdgeNotFound):
        extract_top_edge(view, 2.0, 0.2)


def test_three_column_notch_reads_one_millimeter_lower():
    heights = [2.0] * 40
    heights[18:21] = [1.0] * 3
    profile = extract_top_edge(_band(heights, 2.4), 2.0, 0.2)
    assert np.all(np.abs(profile.per_column_height[18:21] - 1.0) <= 1.0 / PPM + 1e-9)
    flank = np.concatenate([profile.per_column_height[:18],
                            profile.per_column_height[21:]])
    assert np.all(np.abs(flank - 2.0) <= 1.0 / PPM + 1e-9)


def test_majority_blank_columns_make_the_band_unreadable():
    heights = [2.0] * 8 + [None] * 12
    with pytest.raises(EdgeNotFound):
        extract_top_edge(_band(heights, 2.4), 2.0, 0.2)


def test_stats_of_a_perfect_profile_are_all_zero():
    profile = HeightProfile(per_column_height=np.full(30, 1.2),
                            reference_height=1.2, layer_height=0.2)
    stats = height_stats(profile)
    assert (stats.mean_error, stats.total_error, stats.max_abs_error) == (0.0, 0.0, 0.0)


def test_stats_of_a_balanced_half_and_half_profile():
    heights = np.concatenate([np.full(20, 1.6), np.full(20, 0.8)])  # ±0.4 around 1.2
    stats = height_stats(HeightProfile(heights, 1.2, 0.2))
    assert stats.mean_error == pytest.approx(0.0, abs=1e-12)
    assert stats.total_error == pytest.approx(0.4)
    assert stats.max_abs_error == pytest.approx(0.4)


def test_stats_match_a_direct_numpy_oracle():
    rng = np.random.default_rng(11)
    heights = rng.uniform(0.0, 3.0, size=64)
    ref = 1.5
    stats = height_stats(HeightProfile(heights, ref, 0.2))
    err = heights - ref
    assert stats.mean_error == pytest.approx(err.mean(), abs=1e-12)
    assert stats.total_error == pytest.approx(np.abs(err).mean(), abs=1e-12)
    assert stats.max_abs_error == pytest.approx(np.abs(err).max(), abs=1e-12)


def test_stats_are_invariant_to_column_order():
    rng = np.random.default_rng(5)
    heights = rng.uniform(0.0, 2.0, size=32)
    a = height_stats(HeightProfile(heights, 1.0, 0.2))
    b = height_stats(HeightProfile(rng.permutation(heights), 1.0, 0.2))
    assert a.mean_error == pytest.approx(b.mean_error, abs=1e-12)
    assert a.total_error == pytest.approx(b.total_error, abs=1e-12)
    assert a.max_abs_error == b.max_abs_error


def test_verdict_is_ok_for_a_clean_history():
    history = [_stats(0.0, 0.0)] * 5
    assert height_verdict(history, 0.2) is HeightState.OK


def test_single_one_and_a_half_layer_excess_is_only_a_warning():
    history = [_stats(0.0, 0.0), _stats(0.3, 0.3)]
    assert height_verdict(history, 0.2) is HeightState.WARNING


def test_two_consecutive_excesses_fail():
    history = [_stats(0.3, 0.3), _stats(0.3, 0.3)]
    assert height_verdict(history, 0.2) is HeightState.FAILURE


def test_excess_beyond_two_layer_heights_fails_immediately():
    assert height_verdict([_stats(0.5, 0.5)], 0.2) is HeightState.FAILURE


def test_recovery_after_a_warning_resets_to_ok():
    history = [_stats(0.3, 0.3), _stats(0.0, 0.0)]
    assert height_verdict(history, 0.2) is HeightState.OK


def test_verdict_rejects_empty_history_and_bad_multiples():
    with pytest.raises(HeightError):
        height_verdict([], 0.2)
    with pytest.raises(HeightError):
        height_verdict([_stats(0.0, 0.0)], 0.2, warn_mult=0.0)


_SEVERITY = {HeightState.OK: 0, HeightState.WARNING: 1, HeightState.FAILURE: 2}


@settings(max_examples=50, deadline=None)
@given(
    base=st.floats(0.0, 0.6),
    scale=st.floats(1.0, 4.0),
    prev=st.floats(0.0, 0.6),
)
def test_scaling_the_latest_error_up_never_lowers_severity(base, scale, prev):
    history = [_stats(prev, prev)]
    small = height_verdict(history + [_stats(base, base)], 0.2)
    large = height_verdict(history + [_stats(base * scale, base * scale)], 0.2)
    assert _SEVERITY[large] >= _SEVERITY[small]


def test_negative_heights_are_rejected():
    with pytest.raises(HeightError):
        HeightProfile(per_column_height=np.array([-0.1, 1.0]),
                      reference_height=1.0, layer_height=0.2)


def test_stats_invariant_links_max_to_mean():
    with pytest.raises(HeightError):
        HeightStats(mean_error=0.5, total_error=0.5, max_abs_error=0.1)
