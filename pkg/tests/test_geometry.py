from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerwatch.geometry import (
    Transform2D,
    TransformError,
    point_in_polygon,
    polygon_area,
    polygon_centroid,
    polyline_length,
    resample_polyline,
)

IDENTITY = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _transforms():
    """Invertible-in-family transforms: isotropic scale, free rotation."""
    return st.builds(
        Transform2D,
        theta=st.floats(-math.pi, math.pi, allow_nan=False),
        s_x=st.shared(st.floats(0.5, 2.0), key="s"),
        s_y=st.shared(st.floats(0.5, 2.0), key="s"),
        t_x=st.floats(-10.0, 10.0),
        t_y=st.floats(-10.0, 10.0),
    )


def test_identity_transform_leaves_points_untouched():
    pts = np.array([[1.5, -2.0], [0.0, 0.0], [3.25, 7.5]])
    out = IDENTITY.apply(pts)
    assert np.array_equal(out, pts)
    assert IDENTITY.is_identity


def test_quarter_turn_maps_unit_x_to_unit_y():
    t = Transform2D(theta=math.radians(90.0), s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)
    out = t.apply(np.array([1.0, 0.0]))
    assert np.allclose(out, [0.0, 1.0], atol=1e-12)


def test_pure_translation_shifts_every_vertex():
    t = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=2.0, t_y=-3.0)
    out = t.apply(SQUARE)
    assert np.allclose(out, SQUARE + [2.0, -3.0], atol=1e-12)


def test_apply_about_pivot_keeps_the_pivot_fixed():
    t = Transform2D(theta=0.7, s_x=1.3, s_y=1.3, t_x=0.0, t_y=0.0)
    pivot = (3.0, 4.0)
    out = t.apply(np.array([pivot]), pivot=pivot)
    assert np.allclose(out[0], pivot, atol=1e-12)


def test_rotation_about_pivot_matches_manual_composition():
    theta = math.radians(30.0)
    t = Transform2D(theta=theta, s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)
    pivot = np.array([2.0, -1.0])
    p = np.array([5.0, 3.0])
    c, s = math.cos(theta), math.sin(theta)
    rel = p - pivot
    expect = pivot + np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1]])
    assert np.allclose(t.apply(p, pivot=tuple(pivot)), expect, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(_transforms())
def test_inverse_round_trips_points_within_1e9(t):
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [3.0, -4.0], [-7.5, 6.25]])
    back = t.inverse().apply(t.apply(pts))
    assert np.allclose(back, pts, atol=1e-9)


def test_inverse_of_axis_scale_without_rotation_round_trips():
    t = Transform2D(theta=0.0, s_x=2.0, s_y=0.5, t_x=1.0, t_y=-2.0)
    pts = np.array([[1.0, 1.0], [-3.0, 2.5]])
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)


def test_anisotropic_scale_with_rotation_has_no_in_family_inverse():
    t = Transform2D(theta=0.3, s_x=1.2, s_y=0.8, t_x=0.0, t_y=0.0)
    with pytest.raises(TransformError):
        t.inverse()


def test_magnitude_reports_degrees_and_translation_norm():
    t = Transform2D(theta=math.radians(5.0), s_x=1.0, s_y=1.0, t_x=3.0, t_y=4.0)
    deg, mm = t.magnitude()
    assert deg == pytest.approx(5.0, abs=1e-12)
    assert mm == pytest.approx(5.0, abs=1e-12)


def test_is_identity_rejects_small_but_nonzero_parameters():
    assert not Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=1e-6, t_y=0.0).is_identity
    assert not Transform2D(theta=1e-6, s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0).is_identity


def test_nonpositive_scale_and_nonfinite_parameters_are_rejected():
    with pytest.raises(TransformError):
        Transform2D(theta=0.0, s_x=0.0, s_y=1.0, t_x=0.0, t_y=0.0)
    with pytest.raises(TransformError):
        Transform2D(theta=float("nan"), s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)


def test_theta_is_normalized_into_the_principal_interval():
    t = Transform2D(theta=2.0 * math.pi + 0.1, s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)
    assert t.theta == pytest.approx(0.1, abs=1e-12)
    assert -math.pi < Transform2D(theta=-math.pi).theta <= math.pi


def test_polygon_area_is_signed_by_winding():
    assert polygon_area(SQUARE) == pytest.approx(1.0)
    assert polygon_area(SQUARE[::-1]) == pytest.approx(-1.0)
    closed = np.vstack([SQUARE, SQUARE[:1]])
    assert polygon_area(closed) == pytest.approx(1.0)


def test_polygon_centroid_of_unit_square():
    assert np.allclose(polygon_centroid(SQUARE), [0.5, 0.5], atol=1e-12)


def test_point_in_polygon_inside_outside():
    assert point_in_polygon((0.5, 0.5), SQUARE)
    assert not point_in_polygon((1.5, 0.5), SQUARE)
    assert not point_in_polygon((-0.01, 0.99), SQUARE)


def test_polyline_length_of_closed_square():
    closed = np.vstack([SQUARE, SQUARE[:1]])
    assert polyline_length(closed) == pytest.approx(4.0)
    assert polyline_length(SQUARE[:1]) == 0.0


def test_resample_polyline_spacing_is_uniform():
    line = np.array([[0.0, 0.0], [10.0, 0.0]])
    out = resample_polyline(line, step=1.0)
    gaps = np.diff(out[:, 0])
    assert np.allclose(gaps, gaps[0])
    assert gaps[0] <= 1.0 + 1e-9
    assert np.allclose(out[0], line[0]) and np.allclose(out[-1], line[-1])


def test_resample_polyline_preserves_total_length():
    poly = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 10.0]])
    out = resample_polyline(poly, step=0.25)
    assert polyline_length(out) == pytest.approx(polyline_length(poly), rel=1e-9)
