"""Layer-wise visual monitoring and correction for FFF 3-D printing."""

from .control import LayerReport, decide, emit_commands
from .gcode import parse_gcode
from .harness import RunConfig, RunSummary, run_pipeline, write_report
from .height import height_stats, height_verdict
from .registration import register_layer
from .synth import parse_injections, render_views, write_fixture_dir
from .texture import analyze_texture

__version__ = "0.1.0"

__all__ = [
    "LayerReport",
    "RunConfig",
    "RunSummary",
    "analyze_texture",
    "decide",
    "emit_commands",
    "height_stats",
    "height_verdict",
    "parse_gcode",
    "parse_injections",
    "register_layer",
    "render_views",
    "run_pipeline",
    "write_fixture_dir",
    "write_report",
]
