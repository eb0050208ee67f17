"""G-code parsing, layer segmentation, path classification, and correction.

Supports a Marlin-flavored subset: G0/G1 motion, G28 homing, G90/G91
positioning modes, M82/M83 extrusion modes, temperature and feed-rate
M-codes. Arcs (G2/G3) and inch units (G20) are rejected; everything else
is carried through opaquely so corrected files keep their structure.

All coordinates are millimeters. Layer boundaries come from ";LAYER:"
slicer comments when present, otherwise from Z increases on extruding
moves (Z-hop travels do not split layers).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .geometry import (
    Transform2D,
    TransformError,
    point_in_polygon,
    polygon_area,
    polygon_centroid,
)

__all__ = [
    "GcodeError",
    "ParseError",
    "NoOutlineError",
    "PathCategory",
    "Command",
    "PathSegment",
    "LayerParams",
    "Layer",
    "Program",
    "parse_gcode",
    "classify_paths",
    "layer_outline",
    "category_loops",
    "transform_layer",
    "serialize_program",
    "serialize_command",
]

_EPS = 1e-6

_WORD_RE = re.compile(r"^([A-Za-z])([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)?$")

# canonical argument order when regenerating a command line
_ARG_ORDER = "XYZEFSPT"


class GcodeError(ValueError):
    pass


class ParseError(GcodeError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NoOutlineError(GcodeError):
    pass


class PathCategory(Enum):
    SKIRT = "skirt"
    OUTER_WALL = "outer_wall"
    INNER_WALL = "inner_wall"
    INFILL = "infill"
    SUPPORT = "support"
    TRAVEL = "travel"


# slicer ;TYPE: labels -> categories (Cura naming)
_TYPE_LABELS = {
    "SKIRT": PathCategory.SKIRT,
    "WALL-OUTER": PathCategory.OUTER_WALL,
    "WALL-INNER": PathCategory.INNER_WALL,
    "FILL": PathCategory.INFILL,
    "SKIN": PathCategory.INFILL,
    "SUPPORT": PathCategory.SUPPORT,
}


@dataclass
class Command:
    """One G-code line: opcode plus letter arguments.

    ``raw`` keeps the original line for verbatim re-serialization and is
    dropped whenever arguments are rewritten. Structural lines (blank or
    comment-only) use an empty opcode.
    """

    opcode: str
    args: dict = field(default_factory=dict)
    source_line: int = field(default=0, compare=False)
    comment: str | None = None
    raw: str | None = field(default=None, compare=False)

    def arg(self, letter: str, default=None):
        return self.args.get(letter, default)

    @property
    def is_motion(self) -> bool:
        return self.opcode in ("G0", "G1")


@dataclass
class PathSegment:
    """A straight extruder move in the layer plane."""

    start: tuple
    end: tuple
    extrusion: float
    category: PathCategory
    z: float = 0.0
    command_index: int = -1
    labeled: bool = field(default=False, compare=False)

    @property
    def is_extruding(self) -> bool:
        return self.extrusion > 0.0

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])


@dataclass
class LayerParams:
    nozzle_temp: float = 200.0
    bed_temp: float = 60.0
    feed_rate: float = 100.0
    line_width: float = 0.4


@dataclass
class Layer:
    index: int
    z: float
    layer_height: float
    segments: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    params: LayerParams = field(default_factory=LayerParams)

    def extruding_segments(self):
        return [s for s in self.segments if s.is_extruding]

    def segments_of(self, category: PathCategory):
        return [s for s in self.segments if s.category is category]

    @property
    def extrusion_total(self) -> float:
        return sum(s.extrusion for s in self.segments)


@dataclass
class Program:
    layers: list = field(default_factory=list)
    preamble: list = field(default_factory=list)
    postamble: list = field(default_factory=list)

    @property
    def extrusion_total(self) -> float:
        return sum(layer.extrusion_total for layer in self.layers)


class _ParserState:
    def __init__(self):
        self.absolute = True
        self.absolute_e = True
        self.x = None
        self.y = None
        self.z = None
        self.e = 0.0
        self.nozzle_temp = LayerParams.nozzle_temp
        self.bed_temp = LayerParams.bed_temp
        self.feed_rate = LayerParams.feed_rate
        self.line_width = LayerParams.line_width
        self.type_label = None

    def params(self) -> LayerParams:
        return LayerParams(self.nozzle_temp, self.bed_temp, self.feed_rate, self.line_width)


def _parse_line(text: str, lineno: int) -> Command:
    body, comment = text, None
    if ";" in text:
        body, comment = text.split(";", 1)
    body = body.strip()
    if not body:
        return Command("", {}, lineno, comment, raw=text)
    tokens = body.split()
    m = _WORD_RE.match(tokens[0])
    if m is None:
        raise ParseError(f"malformed command word {tokens[0]!r}", lineno)
    letter, number = m.group(1).upper(), m.group(2)
    if number is None:
        opcode = letter
    else:
        try:
            opcode = letter + str(int(float(number)))
        except ValueError:
            raise ParseError(f"malformed opcode number {number!r}", lineno)
    args: dict = {}
    for token in tokens[1:]:
        m = _WORD_RE.match(token)
        if m is None:
            raise ParseError(f"malformed argument {token!r}", lineno)
        letter = m.group(1).upper()
        if letter in args:
            raise ParseError(f"duplicate argument letter {letter}", lineno)
        if m.group(2) is None:
            args[letter] = None
        else:
            args[letter] = float(m.group(2))
    return Command(opcode, args, lineno, comment, raw=text)


def serialize_command(cmd: Command) -> str:
    """Render a command back to a G-code line.

    Unmodified commands reproduce their original text; regenerated ones
    use repr() floats so values survive a re-parse bit-exactly.
    """
    if cmd.raw is not None:
        return cmd.raw
    if not cmd.opcode:
        return ";" + cmd.comment if cmd.comment is not None else ""
    parts = [cmd.opcode]
    letters = list(cmd.args)
    letters.sort(key=lambda c: (_ARG_ORDER.index(c) if c in _ARG_ORDER else len(_ARG_ORDER), c))
    for letter in letters:
        value = cmd.args[letter]
        if value is None:
            parts.append(letter)
        elif value == int(value) and abs(value) < 1e15:
            parts.append(f"{letter}{int(value)}" if letter not in "XYZE" else f"{letter}{value!r}")
        else:
            parts.append(f"{letter}{value!r}")
    line = " ".join(parts)
    if cmd.comment is not None:
        line += " ;" + cmd.comment
    return line


def parse_gcode(text: str) -> Program:
    """Parse G-code source into a layered Program.

    Every G0/G1 with XY motion becomes a PathSegment in exactly one
    layer; non-motion commands ride along verbatim. Raises ParseError
    (with line number) on malformed numbers, arcs, inch mode, or
    relative motion before any position is known.
    """
    state = _ParserState()
    program = Program()
    current: Layer | None = None
    last_extruding_cmd_idx = -1  # index into current.commands
    pending_layer_index = 0

    def start_layer(z: float | None):
        nonlocal current, last_extruding_cmd_idx, pending_layer_index
        if current is not None:
            program.layers.append(current)
        prev_z = program.layers[-1].z if program.layers else 0.0
        current = Layer(
            index=pending_layer_index,
            z=z if z is not None else prev_z,
            layer_height=0.0,
            params=state.params(),
        )
        pending_layer_index += 1
        last_extruding_cmd_idx = -1

    for lineno, line in enumerate(text.splitlines(), start=1):
        cmd = _parse_line(line, lineno)
        comment = (cmd.comment or "").strip()

        if comment.upper().startswith("LAYER:"):
            start_layer(None)
        elif comment.upper().startswith("TYPE:"):
            state.type_label = _TYPE_LABELS.get(comment[5:].strip().upper())
        elif comment.upper().startswith("LINE_WIDTH:"):
            try:
                state.line_width = float(comment.split(":", 1)[1])
            except ValueError:
                raise ParseError("malformed LINE_WIDTH comment", lineno)

        if cmd.opcode == "G20":
            raise ParseError("inch units (G20) not supported", lineno)
        if cmd.opcode in ("G2", "G3"):
            raise ParseError("arc moves (G2/G3) not supported", lineno)

        segment = None
        if cmd.opcode == "G90":
            state.absolute = True
        elif cmd.opcode == "G91":
            state.absolute = False
        elif cmd.opcode == "M82":
            state.absolute_e = True
        elif cmd.opcode == "M83":
            state.absolute_e = False
        elif cmd.opcode == "G28":
            state.x, state.y, state.z = 0.0, 0.0, 0.0
        elif cmd.opcode in ("M104", "M109"):
            if cmd.arg("S") is not None:
                state.nozzle_temp = cmd.arg("S")
        elif cmd.opcode in ("M140", "M190"):
            if cmd.arg("S") is not None:
                state.bed_temp = cmd.arg("S")
        elif cmd.opcode == "M220":
            if cmd.arg("S") is not None:
                state.feed_rate = cmd.arg("S")
        elif cmd.is_motion:
            segment = _apply_motion(cmd, state, lineno)

        if segment is not None and segment.is_extruding:
            if current is None:
                start_layer(segment.z)
            elif not any(s.is_extruding for s in current.segments):
                current.z = segment.z
            elif segment.z > current.z + _EPS:
                start_layer(segment.z)
            elif segment.z < current.z - _EPS:
                raise ParseError("extruding move below current layer Z", lineno)
            if state.type_label is not None:
                segment.category = state.type_label
                segment.labeled = True

        if current is None:
            program.preamble.append(cmd)
        else:
            current.commands.append(cmd)
            if segment is not None:
                segment.command_index = len(current.commands) - 1
                current.segments.append(segment)
                if segment.is_extruding:
                    last_extruding_cmd_idx = segment.command_index

    if current is not None:
        # trailing shutdown commands belong to the postamble
        cut = last_extruding_cmd_idx + 1
        tail = current.commands[cut:]
        current.commands = current.commands[:cut]
        current.segments = [s for s in current.segments if s.command_index < cut]
        program.postamble.extend(tail)
        if any(s.is_extruding for s in current.segments):
            program.layers.append(current)
        else:
            program.postamble.extend(current.commands)

    _finalize_layers(program)
    return program


def _apply_motion(cmd: Command, state: _ParserState, lineno: int):
    for letter in ("X", "Y", "Z", "E"):
        if letter in cmd.args and cmd.args[letter] is None:
            raise ParseError(f"missing value for {letter}", lineno)
    x0, y0 = state.x, state.y
    if state.absolute:
        x1 = cmd.arg("X", x0)
        y1 = cmd.arg("Y", y0)
        z1 = cmd.arg("Z", state.z)
    else:
        if ("X" in cmd.args or "Y" in cmd.args or "Z" in cmd.args) and (
            x0 is None or y0 is None or state.z is None
        ):
            raise ParseError("relative move before position is established", lineno)
        x1 = x0 + cmd.arg("X", 0.0)
        y1 = y0 + cmd.arg("Y", 0.0)
        z1 = state.z + cmd.arg("Z", 0.0)

    de = 0.0
    if "E" in cmd.args:
        if state.absolute_e:
            de = cmd.arg("E") - state.e
            state.e = cmd.arg("E")
        else:
            de = cmd.arg("E")
            state.e += de

    state.x, state.y, state.z = x1, y1, z1
    if x0 is None or y0 is None or (x1 == x0 and y1 == y0):
        return None
    extrusion = max(de, 0.0)
    category = PathCategory.INFILL if extrusion > 0 else PathCategory.TRAVEL
    return PathSegment((x0, y0), (x1, y1), extrusion, category, z=z1 if z1 is not None else 0.0)


def _finalize_layers(program: Program):
    prev_z = 0.0
    for i, layer in enumerate(program.layers):
        layer.index = i
        layer.layer_height = layer.z - prev_z
        if layer.layer_height <= 0:
            raise GcodeError(f"layer {i} has non-increasing Z ({layer.z} after {prev_z})")
        prev_z = layer.z


# ---------------------------------------------------------------------------
# path classification


def _chains(layer: Layer):
    """Group consecutive extruding segments into connected polyline chains."""
    chains = []
    run = []
    for seg in layer.segments:
        if not seg.is_extruding:
            if run:
                chains.append(run)
            run = []
            continue
        if run and not np.allclose(run[-1].end, seg.start, atol=_EPS):
            chains.append(run)
            run = []
        run.append(seg)
    if run:
        chains.append(run)
    return chains


def _chain_poly(chain) -> np.ndarray:
    pts = [chain[0].start] + [seg.end for seg in chain]
    return np.asarray(pts, dtype=float)


def _is_closed(poly: np.ndarray) -> bool:
    return len(poly) >= 4 and np.allclose(poly[0], poly[-1], atol=_EPS)


def classify_paths(layer: Layer, skirt_gap: float = 2.0) -> Layer:
    """Assign semantic categories to the layer's extruding segments.

    Slicer ;TYPE: labels (stamped during parsing) are authoritative.
    Unlabeled chains are classified geometrically: nested closed loops
    become outer/inner walls, open paths inside the outer loop become
    infill, and paths outside it become skirt (closed) or support
    (open). A lone outermost loop separated from the rest by more than
    ``skirt_gap`` millimeters is a skirt.
    """
    chains = _chains(layer)
    unlabeled = [c for c in chains if not all(seg.labeled for seg in c)]
    loops = [(c, _chain_poly(c)) for c in unlabeled if _is_closed(_chain_poly(c))]
    open_chains = [(c, _chain_poly(c)) for c in unlabeled if not _is_closed(_chain_poly(c))]

    # containment depth of each loop among loops
    depths = []
    for i, (_, poly) in enumerate(loops):
        depth = sum(
            1
            for j, (_, other) in enumerate(loops)
            if j != i and point_in_polygon(poly[0], other)
        )
        depths.append(depth)

    categories: dict[int, PathCategory] = {}
    outer_polys = []
    if loops:
        min_depth = min(depths)
        top = [i for i, d in enumerate(depths) if d == min_depth]
        skirt_idx = set()
        if len(top) == 1 and len(loops) > 1:
            # a single outermost loop far from everything underneath is a skirt
            i = top[0]
            inner_pts = np.vstack([loops[j][1] for j in range(len(loops)) if j != i])
            gap = _min_poly_distance(loops[i][1], inner_pts)
            if gap > skirt_gap:
                skirt_idx.add(i)
        for i, (chain, poly) in enumerate(loops):
            if i in skirt_idx:
                categories[i] = PathCategory.SKIRT
            elif depths[i] == min_depth and i not in skirt_idx:
                categories[i] = PathCategory.OUTER_WALL
                outer_polys.append(poly)
            else:
                categories[i] = PathCategory.INNER_WALL
        # loops directly under a skirt promote to outer walls
        if skirt_idx:
            outer_polys = []
            next_depth = min(d for i, d in enumerate(depths) if i not in skirt_idx)
            for i, (chain, poly) in enumerate(loops):
                if i in skirt_idx:
                    continue
                categories[i] = (
                    PathCategory.OUTER_WALL if depths[i] == next_depth else PathCategory.INNER_WALL
                )
                if depths[i] == next_depth:
                    outer_polys.append(poly)

    new_segments = list(layer.segments)
    index_of = {id(seg): k for k, seg in enumerate(new_segments)}

    for i, (chain, _) in enumerate(loops):
        for seg in chain:
            if not seg.labeled:
                new_segments[index_of[id(seg)]] = replace(seg, category=categories[i])

    for chain, poly in open_chains:
        mid = poly[len(poly) // 2]
        inside = any(point_in_polygon(mid, outer) for outer in outer_polys)
        category = PathCategory.INFILL if inside else PathCategory.SUPPORT
        for seg in chain:
            if not seg.labeled:
                new_segments[index_of[id(seg)]] = replace(seg, category=category)

    layer.segments = new_segments
    return layer


def _min_poly_distance(poly: np.ndarray, points: np.ndarray) -> float:
    d = np.hypot(
        poly[:, None, 0] - points[None, :, 0], poly[:, None, 1] - points[None, :, 1]
    )
    return float(d.min())


def layer_outline(layer: Layer) -> list[np.ndarray]:
    """Outer-wall loops of a layer as closed (N, 2) vertex arrays."""
    chains = _chains(layer)
    loops = []
    for chain in chains:
        if all(seg.category is PathCategory.OUTER_WALL for seg in chain):
            poly = _chain_poly(chain)
            if not _is_closed(poly):
                poly = np.vstack([poly, poly[:1]])
            loops.append(poly)
    if not loops:
        raise NoOutlineError(f"layer {layer.index} has no outer wall")
    return loops


def category_loops(layer: Layer, category: PathCategory) -> list[np.ndarray]:
    """Closed loops drawn in one path category; open chains are skipped."""
    loops = []
    for chain in _chains(layer):
        if all(seg.category is category for seg in chain):
            poly = _chain_poly(chain)
            if _is_closed(poly):
                loops.append(poly)
    return loops


def outline_centroid(layer: Layer) -> np.ndarray:
    """Pivot for layer corrections: area centroid of the largest outline loop."""
    try:
        loops = layer_outline(layer)
    except NoOutlineError:
        pts = np.array([s.end for s in layer.extruding_segments()], dtype=float)
        if len(pts) == 0:
            return np.zeros(2)
        return pts.mean(axis=0)
    largest = max(loops, key=lambda p: abs(polygon_area(p)))
    return polygon_centroid(largest)


def transform_layer(layer: Layer, t: Transform2D) -> Layer:
    """Apply a correction transform to all XY coordinates of a layer.

    Rotation and scale act about the layer-outline centroid; Z, E, and F
    are untouched. Motion commands are rewritten with explicit absolute
    X and Y so the corrected file stands alone.
    """
    if t.is_identity:
        return layer
    pivot = outline_centroid(layer)
    new_commands = [replace(c, args=dict(c.args)) for c in layer.commands]
    new_segments = []
    for seg in layer.segments:
        start = t.apply(np.asarray(seg.start), pivot)
        end = t.apply(np.asarray(seg.end), pivot)
        new_segments.append(replace(seg, start=tuple(start), end=tuple(end)))
        if seg.command_index >= 0:
            cmd = new_commands[seg.command_index]
            if not cmd.is_motion:
                raise TransformError("segment does not map to a motion command")
            args = dict(cmd.args)
            args["X"] = float(end[0])
            args["Y"] = float(end[1])
            new_commands[seg.command_index] = replace(cmd, args=args, raw=None)
    return replace(layer, commands=new_commands, segments=new_segments)


def serialize_program(program: Program) -> str:
    lines = [serialize_command(c) for c in program.preamble]
    for layer in program.layers:
        lines.extend(serialize_command(c) for c in layer.commands)
    lines.extend(serialize_command(c) for c in program.postamble)
    return "\n".join(lines) + ("\n" if lines else "")
