"""Per-layer decision logic and printer-side plumbing.

Combines the calibration gates with the three branch verdicts (height,
outline, texture), maps failures to corrective actions, renders actions
as G-code, and drives a printer over a newline/ok line protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

from .gcode import Command, Layer, transform_layer
from .geometry import Transform2D
from .height import HeightState, HeightStats
from .registration import RegistrationResult, RegState
from .texture import AnomalyReport

__all__ = [
    "ControlError",
    "SafetyError",
    "SessionError",
    "IoError",
    "CalibrationFlags",
    "FailureType",
    "PauseReport",
    "SetNozzleTemp",
    "SetBedTemp",
    "SetFeedRate",
    "RepeatLayer",
    "UpdateGcode",
    "Ironing",
    "PatchReplacement",
    "DecisionContext",
    "LayerReport",
    "PrinterState",
    "action_for",
    "decide",
    "emit_commands",
    "EmittedBatch",
    "PrinterSession",
    "printer_session",
]

NOZZLE_TEMP_MIN = 160.0
NOZZLE_TEMP_MAX = 230.0
TEMP_STEP = 5.0
FEED_STEP = 10.0
MAX_TEMP_INTERVENTIONS = 2
MAX_REPEATS = 3
DARK_ANOMALY = -15.0  # gray levels relative to the dominant texture
BRIGHT_ANOMALY = 15.0


class ControlError(RuntimeError):
    pass


class SafetyError(ControlError):
    pass


class SessionError(ControlError):
    pass


class IoError(ControlError):
    pass


@dataclass(frozen=True)
class CalibrationFlags:
    bed_level_ok: bool = True
    dimensional_ok: bool = True
    circularity_ok: bool = True


class FailureType(Enum):
    OUT_OF_FILAMENT = "out_of_filament"
    BLOCKED_NOZZLE = "blocked_nozzle"
    MISSING_LAYER = "missing_layer"
    LOST_DIMENSIONAL_ACCURACY = "lost_dimensional_accuracy"
    BED_LEVELING_ISSUE = "bed_leveling_issue"
    ADHESION_WARPING = "adhesion_warping"
    NOT_STICKING_TO_BED = "not_sticking_to_bed"
    PRINT_OFFSET_BENDING = "print_offset_bending"
    WEAK_INFILL = "weak_infill"
    DEFORMED_INFILL = "deformed_infill"
    BURNT_BLOBS = "burnt_blobs"
    INCOMPLETE_INFILL = "incomplete_infill"
    POOR_SURFACE_ABOVE_SUPPORTS = "poor_surface_above_supports"
    INFILL_SHELL_GAPS = "infill_shell_gaps"


# --- actions ---------------------------------------------------------------


@dataclass(frozen=True)
class PauseReport:
    reason: str = ""
    conditional: bool = False  # applies only on critical deviation


@dataclass(frozen=True)
class SetNozzleTemp:
    delta: float  # °C

    def __post_init__(self):
        if abs(self.delta) > 15.0:
            raise ControlError("nozzle temperature delta exceeds ±15 °C")


@dataclass(frozen=True)
class SetBedTemp:
    delta: float  # °C

    def __post_init__(self):
        if abs(self.delta) > 15.0:
            raise ControlError("bed temperature delta exceeds ±15 °C")


@dataclass(frozen=True)
class SetFeedRate:
    delta: float  # percentage points


@dataclass(frozen=True)
class RepeatLayer:
    count: int = 1

    def __post_init__(self):
        if not (1 <= self.count <= MAX_REPEATS):
            raise ControlError(f"repeat count outside 1..{MAX_REPEATS}")


@dataclass(frozen=True)
class UpdateGcode:
    transform: Transform2D


@dataclass(frozen=True)
class Ironing:
    pass


@dataclass(frozen=True)
class PatchReplacement:
    pass


def action_for(f: FailureType, transform: Transform2D | None = None) -> tuple:
    """Corrective action sequence for one failure type.

    Total over the enum. Conditional pauses are included with their
    condition marked; the decision step drops them when the condition
    does not hold. Coordinate updates embed the supplied correction (or
    identity when called standalone).
    """
    t = transform if transform is not None else Transform2D(0.0, 1.0, 1.0, 0.0, 0.0)
    table = {
        FailureType.OUT_OF_FILAMENT: (PauseReport("out of filament"),),
        FailureType.BLOCKED_NOZZLE: (SetNozzleTemp(+TEMP_STEP), RepeatLayer(1)),
        FailureType.MISSING_LAYER: (RepeatLayer(1),),
        FailureType.LOST_DIMENSIONAL_ACCURACY: (UpdateGcode(t),),
        FailureType.BED_LEVELING_ISSUE: (
            PauseReport("bed leveling issue: manual level recalibration"),
        ),
        FailureType.ADHESION_WARPING: (
            SetBedTemp(+TEMP_STEP),
            PauseReport("critical vertical deviation", conditional=True),
        ),
        FailureType.NOT_STICKING_TO_BED: (
            SetBedTemp(+TEMP_STEP),
            PauseReport("print not sticking to the bed"),
        ),
        FailureType.PRINT_OFFSET_BENDING: (UpdateGcode(t),),
        FailureType.WEAK_INFILL: (SetNozzleTemp(+TEMP_STEP), SetFeedRate(+FEED_STEP)),
        FailureType.DEFORMED_INFILL: (SetNozzleTemp(-TEMP_STEP), SetFeedRate(-FEED_STEP)),
        FailureType.BURNT_BLOBS: (Ironing(),),
        FailureType.INCOMPLETE_INFILL: (PatchReplacement(),),
        FailureType.POOR_SURFACE_ABOVE_SUPPORTS: (SetFeedRate(-FEED_STEP),),
        FailureType.INFILL_SHELL_GAPS: (SetFeedRate(+FEED_STEP),),
    }
    return table[f]


@dataclass(frozen=True)
class DecisionContext:
    """Cross-layer state the per-layer decision depends on."""

    layer_index: int
    nozzle_interventions: int = 0
    bed_interventions: int = 0
    consecutive_repeats: int = 0
    prev_temp_action: bool = False  # nozzle temperature raised for the previous layer
    above_support: bool = False


@dataclass
class LayerReport:
    layer_index: int
    height_state: HeightState | None = None
    height: HeightStats | None = None
    registration: RegistrationResult | None = None
    texture: AnomalyReport | None = None
    failures: tuple = ()
    actions: tuple = ()
    notes: tuple = ()
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if bool(self.failures) != bool(self.actions):
            raise ControlError("actions must be nonempty exactly when failures are")

    @property
    def paused(self) -> bool:
        return any(isinstance(a, PauseReport) for a in self.actions)


def _texture_failure(tex: AnomalyReport, ctx: DecisionContext) -> FailureType:
    """Pick the Table-2 infill row from the dominant defect group's look."""
    if ctx.layer_index == 0:
        return FailureType.BED_LEVELING_ISSUE
    if ctx.above_support:
        return FailureType.POOR_SURFACE_ABOVE_SUPPORTS
    group = max(tex.defect_groups, key=lambda g: g.fraction, default=None)
    if group is None:
        return FailureType.DEFORMED_INFILL
    if group.intensity_delta <= DARK_ANOMALY:
        if group.touches_border:
            return FailureType.INFILL_SHELL_GAPS
        if group.fraction >= 0.5 * tex.anomaly_fraction and tex.anomaly_fraction > 0.25:
            return FailureType.INCOMPLETE_INFILL
        return FailureType.WEAK_INFILL
    if group.intensity_delta >= BRIGHT_ANOMALY:
        return FailureType.BURNT_BLOBS
    return FailureType.DEFORMED_INFILL


def decide(
    calib: CalibrationFlags,
    height_state: HeightState | None,
    height: HeightStats | None,
    registration: RegistrationResult | None,
    texture: AnomalyReport | None,
    ctx: DecisionContext,
) -> LayerReport:
    """Combine branch verdicts into failures and corrective actions.

    Evaluation order: calibration gates, then height, then outline, then
    texture. Undecidable combinations degrade to a pause with a
    diagnostic note. Pure given its inputs.
    """
    failures: list = []
    actions: list = []
    notes: list = []

    def report():
        return LayerReport(
            layer_index=ctx.layer_index,
            height_state=height_state,
            height=height,
            registration=registration,
            texture=texture,
            failures=tuple(failures),
            actions=tuple(actions),
            notes=tuple(notes),
        )

    if not calib.bed_level_ok:
        failures.append(FailureType.BED_LEVELING_ISSUE)
        actions.append(PauseReport("calibration gate: bed leveling not confirmed"))
        return report()
    if not (calib.dimensional_ok and calib.circularity_ok):
        failures.append(FailureType.LOST_DIMENSIONAL_ACCURACY)
        actions.append(PauseReport("calibration gate: dimensional/circularity check failed"))
        return report()

    reg_matched = registration is not None and registration.state is not RegState.FAILURE
    critical_height = height is not None and height_state is HeightState.FAILURE

    if height_state is HeightState.FAILURE:
        if ctx.layer_index == 0:
            failures.append(FailureType.NOT_STICKING_TO_BED)
            actions.extend(_contextualize(action_for(failures[-1]), ctx, critical_height, notes))
        elif reg_matched:
            if ctx.prev_temp_action:
                failures.append(FailureType.MISSING_LAYER)
            else:
                failures.append(FailureType.BLOCKED_NOZZLE)
            actions.extend(_contextualize(action_for(failures[-1]), ctx, critical_height, notes))
        else:
            failures.append(FailureType.OUT_OF_FILAMENT)
            actions.extend(action_for(failures[-1]))
        return report()
    if height_state is HeightState.WARNING:
        if ctx.layer_index == 0:
            failures.append(FailureType.ADHESION_WARPING)
            actions.extend(_contextualize(action_for(failures[-1]), ctx, critical_height, notes))
        else:
            notes.append("height excess tolerated once")

    if registration is not None:
        if registration.state is RegState.CORRECTED:
            correction = registration.transform.inverse()
            kind = (
                FailureType.PRINT_OFFSET_BENDING
                if height_state in (HeightState.WARNING, HeightState.FAILURE)
                else FailureType.LOST_DIMENSIONAL_ACCURACY
            )
            failures.append(kind)
            actions.extend(action_for(kind, transform=correction))
        elif registration.state is RegState.FAILURE:
            failures.append(FailureType.LOST_DIMENSIONAL_ACCURACY)
            actions.append(PauseReport("outline deviation beyond correctable range"))
            return report()

    if texture is not None and texture.defective:
        kind = _texture_failure(texture, ctx)
        failures.append(kind)
        actions.extend(_contextualize(action_for(kind), ctx, critical_height, notes))

    return report()


def _contextualize(action_seq, ctx: DecisionContext, critical: bool, notes: list) -> list:
    """Apply cross-layer guards: drop unmet conditional pauses, escalate
    exhausted temperature/repeat interventions to a pause."""
    out: list = []
    for a in action_seq:
        if isinstance(a, PauseReport) and a.conditional and not critical:
            continue
        if isinstance(a, SetNozzleTemp) and ctx.nozzle_interventions >= MAX_TEMP_INTERVENTIONS:
            notes.append("nozzle temperature interventions exhausted")
            out.append(PauseReport("temperature interventions exhausted"))
            continue
        if isinstance(a, SetBedTemp) and ctx.bed_interventions >= MAX_TEMP_INTERVENTIONS:
            notes.append("bed temperature interventions exhausted")
            out.append(PauseReport("temperature interventions exhausted"))
            continue
        if isinstance(a, RepeatLayer) and ctx.consecutive_repeats + a.count > MAX_REPEATS:
            notes.append("repeat budget exhausted")
            out.append(PauseReport("layer repeated too many times"))
            continue
        out.append(a)
    return out


# --- command emission ------------------------------------------------------


@dataclass(frozen=True)
class PrinterState:
    nozzle_temp: float = 200.0
    bed_temp: float = 60.0
    feed_rate: float = 100.0


@dataclass
class EmittedBatch:
    commands: list
    state: PrinterState
    next_layer: Layer | None
    paused: bool


def emit_commands(
    actions,
    state: PrinterState,
    layer: Layer | None = None,
    next_layer: Layer | None = None,
) -> EmittedBatch:
    """Render actions as G-code against the current printer state.

    Temperature and feed actions emit absolute M-code values; a repeat
    re-emits the layer's motion commands; a coordinate update rewrites
    the next layer rather than emitting anything immediately.
    """
    commands: list = []
    paused = False
    for a in actions:
        if isinstance(a, SetNozzleTemp):
            temp = state.nozzle_temp + a.delta
            if not (NOZZLE_TEMP_MIN <= temp <= NOZZLE_TEMP_MAX):
                raise SafetyError(f"nozzle temperature {temp:.0f} °C outside safety band")
            state = replace(state, nozzle_temp=temp)
            commands.append(Command("M104", {"S": temp}))
        elif isinstance(a, SetBedTemp):
            state = replace(state, bed_temp=state.bed_temp + a.delta)
            commands.append(Command("M140", {"S": state.bed_temp}))
        elif isinstance(a, SetFeedRate):
            state = replace(state, feed_rate=state.feed_rate + a.delta)
            commands.append(Command("M220", {"S": state.feed_rate}))
        elif isinstance(a, PauseReport):
            commands.append(Command("M0", {}, comment=a.reason or None))
            paused = True
        elif isinstance(a, RepeatLayer):
            if layer is None:
                raise ControlError("repeat requested without a layer")
            for _ in range(a.count):
                commands.extend(c for c in layer.commands if c.opcode)
        elif isinstance(a, UpdateGcode):
            if next_layer is not None:
                next_layer = transform_layer(next_layer, a.transform)
        elif isinstance(a, (Ironing, PatchReplacement)):
            name = type(a).__name__.lower()
            commands.append(Command("", {}, comment=f" {name} requested (procedure not automated)"))
        else:
            raise ControlError(f"unknown action {a!r}")
    return EmittedBatch(commands=commands, state=state, next_layer=next_layer, paused=paused)


# --- line-protocol session ---------------------------------------------------

DEFAULT_TIMEOUT = 10.0
TEMP_TIMEOUT = 120.0
_TEMP_OPCODES = {"M104", "M109", "M140", "M190"}


class PrinterSession:
    """Host side of the newline/ok protocol; one command in flight."""

    def __init__(self, channel):
        self.channel = channel
        self.closed = False

    def send(self, command) -> list:
        """Send one command and block until its "ok"; returns any
        informational lines received before the acknowledgment."""
        if self.closed:
            raise IoError("session closed")
        line = command if isinstance(command, str) else _render(command)
        opcode = line.split(None, 1)[0] if line.split() else ""
        timeout = TEMP_TIMEOUT if opcode in _TEMP_OPCODES else DEFAULT_TIMEOUT
        try:
            self.channel.write(line + "\n")
        except (OSError, ValueError) as exc:
            self.closed = True
            raise IoError(f"channel write failed: {exc}") from exc

        info = []
        deadline = time.monotonic() + timeout
        while True:
            reply = self._read_reply(deadline)
            if reply.startswith("ok"):
                return info
            if reply.startswith("Error:") or reply.startswith("!!"):
                raise SessionError(reply)
            info.append(reply)

    def _read_reply(self, deadline: float) -> str:
        while True:
            if time.monotonic() > deadline:
                raise TimeoutError("no acknowledgment from printer")
            try:
                raw = self.channel.readline()
            except (OSError, ValueError) as exc:
                self.closed = True
                raise IoError(f"channel read failed: {exc}") from exc
            if raw is None:
                time.sleep(0.005)
                continue
            if raw == "":
                self.closed = True
                raise IoError("channel closed")
            line = raw.strip()
            if line:
                return line

    def pause(self) -> None:
        self.send("M0")

    def resume(self) -> None:
        self.send("M108")

    def status(self) -> dict:
        info = self.send("M105")
        out = {}
        for line in info:
            for token in line.split():
                if ":" in token:
                    key, _, val = token.partition(":")
                    try:
                        out[key] = float(val)
                    except ValueError:
                        pass
        return out

    def close(self) -> None:
        self.closed = True


def _render(command) -> str:
    from .gcode import serialize_command

    if isinstance(command, Command):
        return serialize_command(command)
    return str(command)


def printer_session(channel) -> PrinterSession:
    """Open a session over any object with write(str) and readline()."""
    return PrinterSession(channel)
