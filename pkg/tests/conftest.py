"""Shared fixtures.

Rendering a camera frame costs a few hundred milliseconds, so the
fixtures that involve the renderer are session-scoped and the tests
treat them as read-only.
"""

from __future__ import annotations

import pytest

from layerwatch.gcode import parse_gcode
from layerwatch.projection import virtual_top_view
from layerwatch.synth import default_rig, render_views, square_gcode


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def square_text():
    return square_gcode(layers=10, dense=True)


@pytest.fixture(scope="session")
def square_program(square_text):
    return parse_gcode(square_text)


@pytest.fixture(scope="session")
def layer5(square_program):
    return square_program.layers[5]


@pytest.fixture(scope="session")
def clean_render(layer5, rig):
    """Layer 5 of the dense square, rendered with no injections."""
    return render_views(layer5, rig, None, seed=5)


@pytest.fixture(scope="session")
def clean_view(clean_render, layer5, rig):
    """Rectified top view of the clean frame, as the pipeline builds it."""
    return virtual_top_view(clean_render.frame, rig.K, rig.pose,
                            plane_z=layer5.z, px_per_mm=rig.px_per_mm)
