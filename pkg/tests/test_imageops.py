from __future__ import annotations

import numpy as np

from layerwatch.imageops import (
    binary_close,
    binary_dilate,
    binary_erode,
    canny_edges,
    fill_polygon,
    hysteresis_mask,
    load_gray,
    regions,
    resize_bilinear,
    sample_bilinear,
    save_gray,
    stroke_paths,
    to_gray,
    to_uint8,
)


def test_canny_on_uniform_image_finds_nothing():
    img = np.full((40, 40), 128, dtype=np.uint8)
    assert not canny_edges(img).any()


def test_canny_on_vertical_step_yields_a_thin_vertical_line():
    img = np.zeros((40, 40), dtype=np.uint8)
    img[:, 20:] = 200
    edges = canny_edges(img)
    rows_hit = edges.any(axis=1)
    assert rows_hit[5:-5].all()
    # non-maximum suppression keeps the ridge at most a couple pixels wide
    widths = edges[5:-5].sum(axis=1)
    assert widths.max() <= 2
    cols = np.nonzero(edges.any(axis=0))[0]
    assert np.all(np.abs(cols - 19.5) <= 2.0)


def test_canny_is_invariant_to_affine_intensity_changes():
    rng = np.random.default_rng(3)
    img = (rng.random((50, 50)) * 60).astype(np.uint8)
    img[:, 25:] += 120
    a = canny_edges(img.astype(float))
    b = canny_edges(img.astype(float) * 0.5 + 40.0)
    assert np.array_equal(a, b)


def test_hysteresis_keeps_weak_pixels_connected_to_strong_ones():
    strength = np.zeros((5, 9))
    strength[2, 1:5] = [10.0, 6.0, 6.0, 6.0]  # strong head, weak tail
    strength[2, 7] = 6.0  # isolated weak pixel
    mask = hysteresis_mask(strength, high=8.0, low=5.0)
    assert mask[2, 1:5].all()
    assert not mask[2, 7]


def test_stroke_paths_draws_the_expected_band():
    img = stroke_paths((30, 30), [[(5.0, 15.0), (25.0, 15.0)]], width_px=3)
    assert img[15, 10] == 255
    assert img[15, 2] == 0
    band = (img[:, 15] > 0).sum()
    assert 3 <= band <= 5


def test_fill_polygon_area_approximates_the_true_area():
    poly = [(5.0, 5.0), (25.0, 5.0), (25.0, 25.0), (5.0, 25.0)]
    img = fill_polygon((30, 30), poly)
    area = (img > 0).sum()
    assert abs(area - 400) <= 45  # 20x20 square, rasterization slack


def test_binary_morphology_round_trip_on_a_blob():
    mask = np.zeros((40, 40), dtype=bool)
    mask[10:30, 10:30] = True
    assert binary_erode(mask, radius=3).sum() < mask.sum()
    assert binary_dilate(mask, radius=3).sum() > mask.sum()
    # closing fills a small hole
    holed = mask.copy()
    holed[19:21, 19:21] = False
    assert binary_close(holed, radius=2)[19:21, 19:21].all()


def test_resize_bilinear_preserves_constant_images():
    img = np.full((17, 23), 77.0)
    out = resize_bilinear(img, (40, 31))
    assert out.shape == (40, 31)
    assert np.allclose(out, 77.0)


def test_sample_bilinear_hits_grid_values_exactly_and_zeros_outside():
    img = np.arange(12, dtype=float).reshape(3, 4)
    vals = sample_bilinear(img, np.array([1.0, 2.0]), np.array([2.0, 3.0]))
    assert np.allclose(vals, [img[1, 2], img[2, 3]])
    assert sample_bilinear(img, np.array([-5.0]), np.array([0.0]))[0] == 0.0


def test_regions_separates_two_blobs_with_correct_geometry():
    mask = np.zeros((20, 20), dtype=bool)
    mask[2:5, 2:5] = True
    mask[12:16, 10:15] = True
    regs = sorted(regions(mask), key=lambda r: r.area)
    assert len(regs) == 2
    assert regs[0].area == 9
    assert regs[1].area == 20
    assert regs[0].centroid == (3.0, 3.0)
    assert regs[1].bbox == (12, 10, 16, 15)
    assert regs[1].mask.shape == mask.shape


def test_region_elongation_of_a_thin_line_is_large():
    mask = np.zeros((20, 40), dtype=bool)
    mask[10, 2:38] = True
    (reg,) = regions(mask)
    assert reg.elongation > 10.0
    square = np.zeros((20, 20), dtype=bool)
    square[5:15, 5:15] = True
    assert regions(square)[0].elongation < 1.5


def test_gray_round_trip_through_png(tmp_path):
    img = (np.arange(100, dtype=np.uint8).reshape(10, 10) * 2).astype(np.uint8)
    path = tmp_path / "roundtrip.png"
    save_gray(path, img)
    assert np.array_equal(load_gray(path), img)


def test_to_gray_and_to_uint8_handle_rgb_and_clipping():
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    gray = to_gray(rgb)
    assert gray.ndim == 2
    out = to_uint8(np.array([[-5.0, 300.0, 128.0]]))
    assert out.dtype == np.uint8
    assert out[0, 0] == 0 and out[0, 1] == 255 and out[0, 2] == 128
