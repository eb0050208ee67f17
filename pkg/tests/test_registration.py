from __future__ import annotations

import math

import numpy as np
import pytest

from layerwatch.geometry import Transform2D
from layerwatch.registration import (
    IcpError,
    PointCloud2D,
    RegState,
    TemplateError,
    VerdictBands,
    _similarity_fit,
    edge_map,
    icp_register,
    match_template,
    rasterize_template,
    register_layer,
    registration_verdict,
    sample_outline,
)

IDENTITY = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=0.0, t_y=0.0)

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]])


def _square(side: float = 40.0) -> np.ndarray:
    h = side / 2.0
    return np.array([[-h, -h], [h, -h], [h, h], [-h, h], [-h, -h]])


def test_template_raster_size_margin_and_anchor():
    tpl = rasterize_template(UNIT_SQUARE, px_per_mm=10.0, stroke_px=2)
    assert tpl.raster.shape == (15, 15)  # ceil(10) + 2*margin + 1
    assert tpl.raster.any()
    # margin keeps the stroke clear of the borders
    assert not tpl.raster[0].any() and not tpl.raster[-1].any()
    assert not tpl.raster[:, 0].any() and not tpl.raster[:, -1].any()
    assert tpl.anchor == pytest.approx((7.0, 7.0))  # centroid 0.7 mm from origin
    assert tpl.origin_mm == pytest.approx((-0.2, -0.2))


def test_template_rejects_degenerate_outlines():
    with pytest.raises(TemplateError):
        rasterize_template(np.array([[0.0, 0.0], [1.0, 0.0]]), px_per_mm=10.0)
    collinear = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(TemplateError):
        rasterize_template(collinear, px_per_mm=10.0)


def test_pasted_template_is_found_exactly_with_unit_score():
    tpl = rasterize_template(_square(10.0), px_per_mm=5.0, stroke_px=2)
    h, w = tpl.raster.shape
    edges = np.zeros((120, 140), dtype=bool)
    edges[40:40 + h, 30:30 + w] = tpl.raster
    match = match_template(edges, tpl)
    assert match.top_left == (30, 40)
    assert match.score == pytest.approx(1.0, abs=1e-6)
    assert match.anchor_px[0] == pytest.approx(30 + tpl.anchor[0])
    assert match.anchor_px[1] == pytest.approx(40 + tpl.anchor[1])


def test_match_score_is_invariant_to_affine_intensity_of_the_edge_image():
    tpl = rasterize_template(_square(10.0), px_per_mm=5.0, stroke_px=2)
    h, w = tpl.raster.shape
    edges = np.zeros((120, 140))
    edges[40:40 + h, 30:30 + w] = tpl.raster
    base = match_template(edges, tpl)
    scaled = match_template(edges * 3.5 + 0.25, tpl)
    assert scaled.top_left == base.top_left
    assert scaled.score == pytest.approx(base.score, abs=1e-9)


def test_template_displacement_is_read_off_the_match():
    tpl = rasterize_template(_square(10.0), px_per_mm=5.0, stroke_px=2)
    h, w = tpl.raster.shape
    edges = np.zeros((120, 140), dtype=bool)
    edges[33:33 + h, 42:42 + w] = tpl.raster  # 12 px right, 7 px up of (30, 40)
    match = match_template(edges, tpl)
    dx = match.top_left[0] - 30
    dy = match.top_left[1] - 40
    assert abs(dx - 12) <= 1 and abs(dy - (-7)) <= 1


def test_sample_outline_spacing_and_loop_bookkeeping():
    cloud = sample_outline(_square(40.0), step_mm=0.5)
    assert cloud.unit == "mm"
    assert cloud.loop_starts == (0,)
    # closed loop of perimeter 160 at half-mm steps, duplicate start dropped
    assert len(cloud.points) == 320
    gaps = np.hypot(*np.diff(np.vstack([cloud.points, cloud.points[:1]]), axis=0).T)
    assert gaps.max() <= 0.5 + 1e-9


def test_icp_on_identical_clouds_returns_identity_immediately():
    target = sample_outline(_square(40.0))
    source = PointCloud2D(points=target.points.copy(), unit="mm")
    result = icp_register(source, target, IDENTITY)
    assert result.converged
    assert result.iterations == 1
    assert result.residual <= 1e-12
    deg, mm = result.transform.magnitude()
    assert deg < 1e-6 and mm < 1e-6
    assert result.transform.s_x == pytest.approx(1.0, abs=1e-9)


def test_icp_recovers_a_rotated_shifted_outline():
    target = sample_outline(_square(40.0))
    truth = Transform2D(theta=math.radians(5.0), s_x=1.0, s_y=1.0, t_x=3.0, t_y=2.0)
    pivot = target.points.mean(axis=0)
    source = PointCloud2D(points=truth.apply(target.points, pivot=tuple(pivot)),
                          unit="mm")
    result = icp_register(source, target, IDENTITY, mask_width_px=60.0, pivot=pivot)
    deg_err = abs(math.degrees(result.transform.theta - truth.theta))
    assert deg_err < 0.1
    assert math.hypot(result.transform.t_x - truth.t_x,
                      result.transform.t_y - truth.t_y) < 0.05


def test_icp_residual_guard_holds_over_randomized_instances():
    # the implementation raises IcpError if the mean squared residual ever
    # increases between iterations; randomized noisy fits exercise that guard
    rng = np.random.default_rng(2)
    target = sample_outline(_square(40.0))
    pivot = target.points.mean(axis=0)
    for _ in range(10):
        truth = Transform2D(
            theta=rng.uniform(-0.1, 0.1),
            s_x=1.0, s_y=1.0,
            t_x=rng.uniform(-3, 3), t_y=rng.uniform(-3, 3),
        )
        pts = truth.apply(target.points, pivot=tuple(pivot))
        pts = pts + rng.normal(0.0, 0.05, size=pts.shape)
        source = PointCloud2D(points=pts, unit="mm")
        result = icp_register(source, target, IDENTITY, mask_width_px=60.0, pivot=pivot)
        assert result.converged


def test_icp_mask_excludes_far_clutter():
    target = sample_outline(_square(40.0))
    clutter = sample_outline(_square(80.0))  # 20 mm out: beyond the mask
    pts = np.vstack([target.points, clutter.points])
    source = PointCloud2D(points=pts, unit="mm")
    result = icp_register(source, target, IDENTITY)
    assert result.pair_count == len(target.points)
    deg, mm = result.transform.magnitude()
    assert deg < 1e-6 and mm < 1e-6


def test_icp_exclude_strips_known_foreign_features():
    # a skirt-like ring 8 mm out sits inside a wide mask; with the ring
    # declared, the fit still recovers the injected shift of the outline
    target = sample_outline(_square(40.0))
    ring = sample_outline(_square(56.0))
    truth = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=2.0, t_y=1.0)
    pivot = target.points.mean(axis=0)
    moved = truth.apply(target.points, pivot=tuple(pivot))
    source = PointCloud2D(points=np.vstack([moved, ring.points]), unit="mm")

    biased = icp_register(source, target, IDENTITY, mask_width_px=80.0, pivot=pivot)
    clean = icp_register(source, target, IDENTITY, mask_width_px=80.0, pivot=pivot,
                         exclude=ring)
    clean_err = math.hypot(clean.transform.t_x - 2.0, clean.transform.t_y - 1.0)
    biased_err = math.hypot(biased.transform.t_x - 2.0, biased.transform.t_y - 1.0)
    assert clean_err < 0.05
    assert biased_err > clean_err


def test_similarity_fit_matches_a_complex_regression_oracle():
    # independent derivation: points as complex numbers, fit y ~ a*z + b by
    # least squares; then s = |a|, theta = arg(a), t = (Re b, Im b)
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.uniform(-10, 10, size=(50, 2))
        truth_s = rng.uniform(0.8, 1.2)
        truth_th = rng.uniform(-0.5, 0.5)
        c, s = math.cos(truth_th), math.sin(truth_th)
        y = truth_s * (x @ np.array([[c, -s], [s, c]]).T)
        y = y + rng.uniform(-5, 5, size=2) + rng.normal(0, 0.1, size=x.shape)

        z = x[:, 0] + 1j * x[:, 1]
        w = y[:, 0] + 1j * y[:, 1]
        zc = z - z.mean()
        a = (w * zc.conj()).sum() / (zc * zc.conj()).sum().real
        b = w.mean() - a * z.mean()

        fit_s, fit_R, fit_t = _similarity_fit(x, y)
        assert fit_s == pytest.approx(abs(a), abs=1e-9)
        fit_th = math.atan2(fit_R[1, 0], fit_R[0, 0])
        assert fit_th == pytest.approx(np.angle(a), abs=1e-9)
        assert fit_t[0] == pytest.approx(b.real, abs=1e-9)
        assert fit_t[1] == pytest.approx(b.imag, abs=1e-9)


def test_similarity_fit_rejects_a_degenerate_cloud():
    x = np.zeros((10, 2))
    with pytest.raises(IcpError):
        _similarity_fit(x, x + 1.0)


def test_verdict_bands_classify_the_canonical_cases():
    assert registration_verdict(IDENTITY, residual=0.0) is RegState.ALIGNED
    corrected = Transform2D(theta=math.radians(5.0), s_x=1.0, s_y=1.0, t_x=4.0, t_y=0.0)
    assert registration_verdict(corrected, residual=0.1) is RegState.CORRECTED
    too_far = Transform2D(theta=0.0, s_x=1.0, s_y=1.0, t_x=12.0, t_y=0.0)
    assert registration_verdict(too_far, residual=0.1) is RegState.FAILURE


def test_verdict_distrusts_a_weak_match_score():
    assert registration_verdict(IDENTITY, residual=0.0, score=0.1) is RegState.FAILURE
    assert registration_verdict(IDENTITY, residual=0.0, score=0.9) is RegState.ALIGNED


def test_verdict_flags_scale_drift_between_the_bands():
    swollen = Transform2D(theta=0.0, s_x=1.05, s_y=1.05, t_x=0.0, t_y=0.0)
    assert registration_verdict(swollen, residual=0.0) is RegState.CORRECTED
    ballooned = Transform2D(theta=0.0, s_x=1.2, s_y=1.2, t_x=0.0, t_y=0.0)
    assert registration_verdict(ballooned, residual=0.0) is RegState.FAILURE


def test_register_layer_aligns_a_clean_render(clean_view, layer5):
    from layerwatch.gcode import PathCategory, category_loops, layer_outline

    result = register_layer(clean_view, layer_outline(layer5),
                            exclude=category_loops(layer5, PathCategory.SKIRT))
    assert result.state is RegState.ALIGNED
    deg, mm = result.transform.magnitude()
    assert deg <= 2.0 and mm <= 1.7
    assert result.score > 0.2


def test_edge_map_covers_the_rendered_outline(clean_view, layer5):
    from layerwatch.gcode import layer_outline

    edges = edge_map(clean_view)
    outline = layer_outline(layer5)[0]
    px = clean_view.world_to_px(outline)
    ys, xs = np.nonzero(edges)
    pts = np.stack([xs, ys], axis=1).astype(float)
    covered = 0
    for p in px[:-1]:
        d = np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1]).min()
        covered += d <= 2.0
    assert covered >= 0.9 * (len(px) - 1)


def test_point_cloud_validation():
    with pytest.raises(Exception):
        PointCloud2D(points=np.array([[np.nan, 0.0]]), unit="mm")
    with pytest.raises(Exception):
        PointCloud2D(points=np.zeros((2, 2)), unit="furlong")
