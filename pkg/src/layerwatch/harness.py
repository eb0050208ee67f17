"""Pipeline runner: frames plus G-code in, per-layer reports out.

Walks the print layer by layer in causal order: side band first (height
rules), then the rectified top view (outline registration, texture),
then the decision step, optionally streaming corrective commands to a
printer session. Sources are either a frames directory (layer_%04d.png
with side_%04d.png bands) or an on-the-fly synthetic closed loop
(``synth:<injection spec>``), where an issued coordinate update really
changes what the next layer renders.

Timing is decomposed into four buckets per layer: io (frame
acquisition), height, outline, texture. The per-run report files are
deterministic for a fixed seed and fixtures except for the timing
fields.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .control import (
    CalibrationFlags,
    DecisionContext,
    FailureType,
    LayerReport,
    PauseReport,
    PrinterState,
    RepeatLayer,
    SetBedTemp,
    SetFeedRate,
    SetNozzleTemp,
    UpdateGcode,
    decide,
    emit_commands,
    printer_session,
)
from .gcode import (
    GcodeError,
    PathCategory,
    category_loops,
    layer_outline,
    parse_gcode,
    transform_layer,
)
from .geometry import Transform2D
from .height import (
    EdgeNotFound,
    HeightError,
    extract_top_edge,
    height_stats,
    height_verdict,
)
from .imageops import load_gray
from .projection import (
    PlaneView,
    ProjectionError,
    load_camera_config,
    project_points,
    pseudo_side_view,
    split_visible,
    virtual_top_view,
    visibility_delimiter,
)
from .registration import (
    MASK_WIDTH_PX,
    RegistrationError,
    RegState,
    VerdictBands,
    register_layer,
)
from .synth import (
    SIDE_PX_PER_MM,
    CameraRig,
    default_rig,
    parse_injections,
    render_views,
    sim_printer,
)
from .texture import DEFAULT_COMPONENTS, DEFECT_THRESHOLD, TextureError, analyze_texture

__all__ = [
    "ConfigError",
    "RunConfig",
    "StageStats",
    "RunSummary",
    "overhead_percent",
    "run_pipeline",
    "write_report",
    "store_failure_crop",
    "report_to_json",
    "SCHEMA_VERSION",
    "STAGES",
]

SCHEMA_VERSION = 1
STAGES = ("io", "height", "outline", "texture")
SYNTH_PREFIX = "synth:"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything one analysis run needs, resolved up front."""

    gcode: str
    frames: str  # directory path, or "synth:<injection spec>"
    camera: str | None = None
    out_dir: str = "run-out"
    printer: str | None = None  # None or "sim"
    seed: int = 0
    every: int = 1
    layers: tuple | None = None  # (lo, hi) inclusive, or None for all
    warn_mult: float = 1.0
    fail_mult: float = 2.0
    bands: VerdictBands = field(default_factory=VerdictBands)
    mask_width_px: float = MASK_WIDTH_PX
    texture_threshold: float = DEFECT_THRESHOLD
    texture_k: int = DEFAULT_COMPONENTS
    print_time_s: float | None = None  # total print run time, enables overhead
    run_id: str | None = None

    def __post_init__(self):
        if self.every < 1:
            raise ConfigError("--every must be at least 1")
        if self.warn_mult <= 0 or self.fail_mult <= 0 or self.texture_threshold <= 0:
            raise ConfigError("thresholds must be positive")
        if self.texture_k < 1 or self.mask_width_px <= 0:
            raise ConfigError("thresholds must be positive")
        if self.layers is not None:
            lo, hi = self.layers
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad layer range {self.layers!r}")
        if self.printer not in (None, "sim"):
            raise ConfigError(f"unknown printer target {self.printer!r}")
        if not Path(self.gcode).is_file():
            raise ConfigError(f"G-code file not found: {self.gcode}")
        if not self.is_synth and not Path(self.frames).is_dir():
            raise ConfigError(f"frames directory not found: {self.frames}")
        if self.camera is not None and not Path(self.camera).is_file():
            raise ConfigError(f"camera config not found: {self.camera}")

    @property
    def is_synth(self) -> bool:
        return self.frames.startswith(SYNTH_PREFIX)

    @property
    def injection_spec(self) -> str:
        return self.frames[len(SYNTH_PREFIX):] if self.is_synth else ""

    def selected(self, index: int) -> bool:
        if self.layers is not None and not (self.layers[0] <= index <= self.layers[1]):
            return False
        base = self.layers[0] if self.layers is not None else 0
        return (index - base) % self.every == 0


@dataclass(frozen=True)
class StageStats:
    mean_s: float
    min_s: float
    max_s: float


@dataclass
class RunSummary:
    reports: tuple  # LayerReport per analyzed layer
    stage_stats: dict  # stage name -> StageStats
    layer_mean_s: float
    overhead_percent: float | None
    analyzed_layers: int
    suspended: bool
    run_id: str
    schema_version: int = SCHEMA_VERSION


def overhead_percent(layer_time_s: float, layers: int, print_time_s: float) -> float:
    """Production-time overhead, percent, of analyzing every layer."""
    if print_time_s <= 0:
        raise ValueError("print run time must be positive")
    return 100.0 * layer_time_s * layers / print_time_s


def _derive_run_id(config: RunConfig, gcode_text: str) -> str:
    digest = hashlib.sha256()
    digest.update(gcode_text.encode())
    digest.update(str(config.seed).encode())
    digest.update(config.frames.encode())
    return digest.hexdigest()[:12]


# --- frame sources -----------------------------------------------------------


class _SynthSource:
    """Closed loop: renders the working (possibly corrected) layer."""

    def __init__(self, config: RunConfig, program):
        self.injections = parse_injections(config.injection_spec)
        if config.camera is not None:
            K, pose, ppm = load_camera_config(config.camera)
            if pose is None:
                raise ConfigError("camera config lacks a pose")
            self.rig = CameraRig(K=K, pose=pose, px_per_mm=ppm or 5.26)
        else:
            self.rig = default_rig()
        self.seed = config.seed

    def fetch(self, layer, working_layer):
        rendered = render_views(working_layer, self.rig, self.injections,
                                seed=self.seed + layer.index)
        return rendered.frame, rendered.side_band


class _DirSource:
    """Reads layer_%04d.png frames plus side_%04d.png bands if present."""

    def __init__(self, config: RunConfig, program):
        if config.camera is None:
            raise ConfigError("frames directory mode requires --camera")
        K, pose, ppm = load_camera_config(config.camera)
        if pose is None:
            raise ConfigError("camera config lacks a pose")
        self.rig = CameraRig(K=K, pose=pose, px_per_mm=ppm or 5.26)
        self.dir = Path(config.frames)

    def fetch(self, layer, working_layer):
        frame_path = self.dir / f"layer_{layer.index:04d}.png"
        if not frame_path.is_file():
            return None, None
        frame = load_gray(frame_path)
        side_path = self.dir / f"side_{layer.index:04d}.png"
        side = None
        if side_path.is_file():
            side = PlaneView(
                image=load_gray(side_path),
                px_per_mm=SIDE_PX_PER_MM,
                origin=(0.0, 0.0),
                plane_z=(layer.index + 2) * layer.layer_height,
            )
        else:
            side = self._unwrap_side(frame, layer)
        return frame, side

    def _unwrap_side(self, frame, layer):
        outline = max(layer_outline(layer), key=len)
        pts3 = np.column_stack([outline, np.full(len(outline), layer.z)])
        outline_px = project_points(pts3, self.rig.K, self.rig.pose)
        m, b = visibility_delimiter(outline_px)
        visible, _ = split_visible(outline, outline_px, m, b)
        return pseudo_side_view(frame, self.rig.K, self.rig.pose, visible,
                                layer.layer_height, layer.index)


# --- per-layer pipeline --------------------------------------------------------


class _Stopwatch:
    def __init__(self):
        self.buckets = {}

    def time(self, name: str):
        return _StageTimer(self.buckets, name)


class _StageTimer:
    def __init__(self, buckets, name):
        self.buckets = buckets
        self.name = name

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.buckets[self.name] = self.buckets.get(self.name, 0.0) + (
            time.monotonic() - self.t0
        )
        return False


# branch-error downgrades carry the nearest Table-2 hypothesis so the
# report invariant (actions iff failures) holds while the action itself
# is the conservative pause
_BRANCH_HYPOTHESIS = {
    "height": FailureType.OUT_OF_FILAMENT,
    "outline": FailureType.LOST_DIMENSIONAL_ACCURACY,
    "texture": FailureType.DEFORMED_INFILL,
}


def _merge_branch_errors(report: LayerReport, errors: list) -> LayerReport:
    if not errors:
        return report
    failures = list(report.failures)
    actions = list(report.actions)
    notes = list(report.notes)
    for stage, exc in errors:
        failures.append(_BRANCH_HYPOTHESIS[stage])
        actions.append(PauseReport(f"{stage} branch error: {exc}"))
        notes.append(f"{stage} branch degraded to pause")
    return replace(report, failures=tuple(failures), actions=tuple(actions),
                   notes=tuple(notes))


def run_pipeline(config: RunConfig) -> RunSummary:
    """Analyze every selected layer of the program in print order.

    Per layer: acquire frame and side band, run the height rules, rectify
    the top view, register the outline, analyze the infill texture,
    decide, and (when a printer target is configured) emit the corrective
    commands. A branch that raises downgrades to a pause in that layer's
    report instead of aborting the run; a pause suspends the remaining
    layers, mirroring a paused print.
    """
    try:
        gcode_text = Path(config.gcode).read_text(encoding="ascii", errors="strict")
        program = parse_gcode(gcode_text)
    except (OSError, UnicodeError, GcodeError) as exc:
        raise ConfigError(f"unreadable G-code: {exc}") from exc
    if not program.layers:
        raise ConfigError("G-code contains no layers")

    try:
        source = _SynthSource(config, program) if config.is_synth else _DirSource(config, program)
    except (OSError, ProjectionError) as exc:
        raise ConfigError(f"unreadable camera config: {exc}") from exc

    session = None
    printer_state = PrinterState()
    if config.printer == "sim":
        session = printer_session(sim_printer())

    run_id = config.run_id or _derive_run_id(config, gcode_text)
    reports = []
    history = []
    correction: Transform2D | None = None
    nozzle_interventions = 0
    bed_interventions = 0
    consecutive_repeats = 0
    prev_temp_action = False
    suspended = False

    for pos, layer in enumerate(program.layers):
        if not config.selected(layer.index):
            continue
        if suspended:
            break
        watch = _Stopwatch()
        branch_errors = []
        h = layer.layer_height

        with watch.time("io"):
            working = transform_layer(layer, correction) if correction is not None else layer
            frame, side = source.fetch(layer, working)
        if frame is None:
            reports.append(LayerReport(
                layer_index=layer.index,
                notes=(f"frame missing for layer {layer.index}; skipped",),
                timings=dict(watch.buckets),
            ))
            continue

        hstate = stats = None
        with watch.time("height"):
            try:
                if side is None:
                    raise EdgeNotFound("no side band available")
                profile = extract_top_edge(side, (layer.index + 1) * h, h)
                stats = height_stats(profile)
                history.append(stats)
                hstate = height_verdict(history, h, config.warn_mult, config.fail_mult)
            except (HeightError, ProjectionError) as exc:
                branch_errors.append(("height", exc))

        reg = None
        view = None
        with watch.time("outline"):
            try:
                view = virtual_top_view(frame, source.rig.K, source.rig.pose,
                                        plane_z=layer.z, px_per_mm=source.rig.px_per_mm)
                reg = register_layer(view, layer_outline(layer),
                                     mask_width_px=config.mask_width_px,
                                     bands=config.bands,
                                     exclude=category_loops(layer, PathCategory.SKIRT))
            except (RegistrationError, ProjectionError, GcodeError) as exc:
                branch_errors.append(("outline", exc))

        tex = None
        with watch.time("texture"):
            if view is not None and reg is not None and reg.state is not RegState.FAILURE:
                try:
                    tex_layer = layer
                    if reg.state is RegState.CORRECTED:
                        tex_layer = transform_layer(layer, reg.transform)
                    tex = analyze_texture(
                        view.image, tex_layer, view,
                        k=config.texture_k,
                        seed=config.seed + layer.index,
                        threshold=config.texture_threshold,
                    )
                except (TextureError, GcodeError) as exc:
                    branch_errors.append(("texture", exc))

        below = program.layers[pos - 1] if pos > 0 else None
        ctx = DecisionContext(
            layer_index=layer.index,
            nozzle_interventions=nozzle_interventions,
            bed_interventions=bed_interventions,
            consecutive_repeats=consecutive_repeats,
            prev_temp_action=prev_temp_action,
            above_support=below is not None and any(
                s.category is PathCategory.SUPPORT for s in below.segments
            ),
        )
        report = decide(CalibrationFlags(), hstate, stats, reg, tex, ctx)
        report = _merge_branch_errors(report, branch_errors)
        report.timings = dict(watch.buckets)
        reports.append(report)

        if tex is not None and tex.defective:
            hyp = report.failures[0].value if report.failures else None
            store_failure_crop(tex, view.image, layer.index, config.out_dir,
                               run_id=run_id, hypothesis=hyp)

        # cross-layer bookkeeping
        nozzle_interventions += sum(isinstance(a, SetNozzleTemp) for a in report.actions)
        bed_interventions += sum(isinstance(a, SetBedTemp) for a in report.actions)
        if any(isinstance(a, RepeatLayer) for a in report.actions):
            consecutive_repeats += 1
        else:
            consecutive_repeats = 0
        prev_temp_action = any(
            isinstance(a, SetNozzleTemp) and a.delta > 0 for a in report.actions
        )

        updates = [a for a in report.actions if isinstance(a, UpdateGcode)]
        if updates:
            # the measured deviation already includes any active
            # correction, so the fresh correction composes on the left
            # of the inverse measurement rather than accumulating blindly
            new = updates[-1].transform
            correction = new if correction is None else _compose(correction, new)

        if session is not None:
            next_layer = program.layers[pos + 1] if pos + 1 < len(program.layers) else None
            batch = emit_commands(report.actions, printer_state,
                                  layer=working, next_layer=next_layer)
            printer_state = batch.state
            for cmd in batch.commands:
                session.send(cmd)

        if report.paused:
            suspended = True

    totals = [sum(r.timings.values()) for r in reports if r.timings]
    stage_stats = {}
    for stage in STAGES:
        vals = [r.timings[stage] for r in reports if stage in r.timings]
        if vals:
            stage_stats[stage] = StageStats(
                mean_s=float(np.mean(vals)), min_s=min(vals), max_s=max(vals))
    layer_mean = float(np.mean(totals)) if totals else 0.0
    overhead = None
    if config.print_time_s is not None and reports:
        overhead = overhead_percent(layer_mean, len(reports), config.print_time_s)

    return RunSummary(
        reports=tuple(reports),
        stage_stats=stage_stats,
        layer_mean_s=layer_mean,
        overhead_percent=overhead,
        analyzed_layers=len(reports),
        suspended=suspended,
        run_id=run_id,
    )


def _compose(first: Transform2D, second: Transform2D) -> Transform2D:
    """first ∘ second about a shared pivot: apply ``second``, then ``first``.

    Exact only for isotropic members (all corrections are: ICP estimates
    a single scale), where the composed translation follows from the
    image of the origin: q = s·t.
    """
    for t in (first, second):
        if not math.isclose(t.s_x, t.s_y, rel_tol=1e-9):
            raise ValueError("cannot compose anisotropic corrections")
    q = first.apply(second.apply(np.zeros(2)))
    theta = math.remainder(first.theta + second.theta, math.tau)
    scale = first.s_x * second.s_x
    return Transform2D(theta=theta, s_x=scale, s_y=scale,
                       t_x=float(q[0]) / scale, t_y=float(q[1]) / scale)


# --- report files ---------------------------------------------------------------


def _action_json(action) -> dict:
    name = type(action).__name__
    out = {"type": name}
    if isinstance(action, PauseReport):
        out["reason"] = action.reason
        out["conditional"] = action.conditional
    elif isinstance(action, (SetNozzleTemp, SetBedTemp, SetFeedRate)):
        out["delta"] = action.delta
    elif isinstance(action, RepeatLayer):
        out["count"] = action.count
    elif isinstance(action, UpdateGcode):
        t = action.transform
        out["transform"] = {
            "theta_deg": math.degrees(t.theta),
            "s_x": t.s_x, "s_y": t.s_y, "t_x": t.t_x, "t_y": t.t_y,
        }
    return out


def report_to_json(report: LayerReport) -> dict:
    """Stable JSON shape of one layer report; timings stay last."""
    out: dict = {
        "schema_version": SCHEMA_VERSION,
        "layer": report.layer_index,
        "height_state": report.height_state.value if report.height_state else None,
        "height": None,
        "registration": None,
        "texture": None,
        "failures": [f.value for f in report.failures],
        "actions": [_action_json(a) for a in report.actions],
        "notes": list(report.notes),
    }
    if report.height is not None:
        out["height"] = {
            "mean_error": round(report.height.mean_error, 6),
            "total_error": round(report.height.total_error, 6),
            "max_abs_error": round(report.height.max_abs_error, 6),
        }
    if report.registration is not None:
        r = report.registration
        out["registration"] = {
            "state": r.state.value,
            "theta_deg": round(math.degrees(r.transform.theta), 6),
            "t_x": round(r.transform.t_x, 6),
            "t_y": round(r.transform.t_y, 6),
            "s_x": round(r.transform.s_x, 6),
            "s_y": round(r.transform.s_y, 6),
            "residual": round(r.residual, 9) if math.isfinite(r.residual) else None,
            "score": round(r.score, 6),
        }
    if report.texture is not None:
        t = report.texture
        out["texture"] = {
            "defective": t.defective,
            "anomaly_fraction": round(t.anomaly_fraction, 6),
            "threshold": t.threshold,
            "groups": [
                {
                    "fraction": round(g.fraction, 6),
                    "centroid": [round(float(c), 2) for c in g.centroid],
                    "intensity_delta": round(float(g.intensity_delta), 3),
                    "touches_border": g.touches_border,
                }
                for g in t.defect_groups
            ],
        }
    out["timings"] = {k: round(v, 6) for k, v in report.timings.items()}
    return out


def write_report(summary: RunSummary, out_dir) -> dict:
    """Write report.jsonl, summary.json, and timing.csv under out_dir.

    Returns the paths written. report.jsonl is one layer report per
    line; every line is deterministic for fixed seed and fixtures except
    its trailing "timings" key.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.jsonl",
        "summary": out / "summary.json",
        "timing": out / "timing.csv",
    }
    with open(paths["report"], "w", encoding="ascii") as fh:
        for report in summary.reports:
            fh.write(json.dumps(report_to_json(report), sort_keys=False) + "\n")

    doc = {
        "schema_version": summary.schema_version,
        "run_id": summary.run_id,
        "analyzed_layers": summary.analyzed_layers,
        "suspended": summary.suspended,
        "layer_mean_s": round(summary.layer_mean_s, 6),
        "overhead_percent": (
            round(summary.overhead_percent, 3)
            if summary.overhead_percent is not None else None
        ),
        "stages": {
            name: {
                "mean_s": round(st.mean_s, 6),
                "min_s": round(st.min_s, 6),
                "max_s": round(st.max_s, 6),
            }
            for name, st in summary.stage_stats.items()
        },
    }
    with open(paths["summary"], "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

    with open(paths["timing"], "w", encoding="ascii") as fh:
        fh.write("layer," + ",".join(STAGES) + ",total\n")
        for report in summary.reports:
            cells = [str(report.layer_index)]
            cells += [f"{report.timings.get(s, 0.0):.6f}" for s in STAGES]
            cells.append(f"{sum(report.timings.values()):.6f}")
            fh.write(",".join(cells) + "\n")
    return paths


# --- failure-crop database -------------------------------------------------------


def store_failure_crop(report, frame, layer_index: int, db_dir,
                       run_id: str = "adhoc", hypothesis: str | None = None):
    """Persist bounding-box crops of a defective report's groups.

    ``frame`` must be the image the report's coordinates index (the
    rectified top view it was produced from). Crops land under
    failures/<run-id>/ with one metadata line each appended to
    metadata.jsonl; returns the record id, or None for a non-defective
    report (no-op).
    """
    if not report.defective or not report.defect_groups:
        return None
    if report.crop_bbox is None:
        return None
    from .imageops import save_gray

    dest = Path(db_dir) / "failures" / run_id
    dest.mkdir(parents=True, exist_ok=True)
    record_id = f"{run_id}/layer_{layer_index:04d}"
    img = np.asarray(frame)

    r0, c0, r1, c1 = report.crop_bbox
    # analysis raster -> view pixels
    size = report.infill_mask.shape if report.infill_mask is not None else (1, 1)
    sr = (r1 - r0) / size[0]
    sc = (c1 - c0) / size[1]

    with open(dest / "metadata.jsonl", "a", encoding="ascii") as fh:
        for gi, group in enumerate(report.defect_groups):
            gr0, gc0, gr1, gc1 = group.bbox
            vr0 = max(int(r0 + gr0 * sr), 0)
            vc0 = max(int(c0 + gc0 * sc), 0)
            vr1 = min(int(math.ceil(r0 + gr1 * sr)), img.shape[0])
            vc1 = min(int(math.ceil(c0 + gc1 * sc)), img.shape[1])
            if vr1 <= vr0 or vc1 <= vc0:
                continue
            name = f"layer_{layer_index:04d}_{gi}.png"
            save_gray(dest / name, img[vr0:vr1, vc0:vc1])
            fh.write(json.dumps({
                "record_id": record_id,
                "layer": layer_index,
                "group": gi,
                "area_fraction": round(float(group.fraction), 6),
                "centroid": [
                    round(r0 + float(group.centroid[0]) * sr, 2),
                    round(c0 + float(group.centroid[1]) * sc, 2),
                ],
                "hypothesis": hypothesis,
                "path": name,
            }) + "\n")
    return record_id
