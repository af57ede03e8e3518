"""The ``.rawcode`` scene program format: data model, parser, emitter, validator.

A program is ten scalar setters in a fixed order, one ``set_ground`` line and
up to 25 ``add`` lines, one statement per line::

    set_sun_intensity(0.981)
    ...
    set_ground([CLIP])
    add(pixels=1582, loc=(-0.553, -0.809, -22.591), height=1.365, rotation=[ROT], appearance=[CLIP])

The text never carries rotation matrices or embeddings; ``[ROT]`` and
``[CLIP]`` parse to unresolved slots. Payloads travel in the binary token
stream (see :mod:`wildcode.codec`). The EBNF is in ``docs/grammar.md``.

Two switches select the grammar profile: ``pixels`` (whether ``add`` lines
start with a ``pixels=`` field) and ``discrete`` (whether ground and object
appearance are integer asset names instead of ``[CLIP]`` slots).
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np

from wildcode import rotmath

MAX_OBJECTS = 25
DEFAULT_EMBED_DIM = 768

SCALAR_SETTERS = (
    "sun_intensity",
    "sun_elevation",
    "sun_size",
    "camera",
    "atmospheric_density",
    "ozone",
    "sun_rotation",
    "dust",
    "sun_strength",
    "air",
)
NON_NEGATIVE = ("atmospheric_density", "ozone", "dust", "sun_strength", "air")
SETTERS = SCALAR_SETTERS + ("ground",)

ROT_LITERAL = "[ROT]"
CLIP_LITERAL = "[CLIP]"


@dataclass(frozen=True)
class Profile:
    pixels: bool = True
    discrete: bool = False


DEFAULT_PROFILE = Profile()


@dataclass(frozen=True, eq=False)
class SceneAttributes:
    sun_intensity: float
    sun_elevation: float
    sun_size: float
    camera: float
    atmospheric_density: float
    ozone: float
    sun_rotation: float
    dust: float
    sun_strength: float
    air: float
    ground: np.ndarray | int | None = None

    def scalars(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in SCALAR_SETTERS], dtype=np.float64)

    def with_scalars(self, values) -> SceneAttributes:
        return replace(self, **{k: float(v) for k, v in zip(SCALAR_SETTERS, values)})


# appearance: None is an unresolved [CLIP] slot, an int a discrete asset
# name, a float vector a resolved embedding
@dataclass(frozen=True, eq=False)
class ObjectRecord:
    loc: tuple[float, float, float]
    height: float
    pixels: int | None = None
    rotation: np.ndarray | None = None
    appearance: np.ndarray | int | None = None


@dataclass(frozen=True, eq=False)
class SceneProgram:
    attributes: SceneAttributes
    objects: tuple[ObjectRecord, ...] = field(default_factory=tuple)

    @property
    def profile(self) -> Profile:
        pixels = all(o.pixels is not None for o in self.objects) if self.objects else True
        discrete = isinstance(self.attributes.ground, (int, np.integer))
        return Profile(pixels=pixels, discrete=discrete)


@dataclass(frozen=True)
class Diagnostic:
    field: str
    problem: str


class ParseError(ValueError):
    def __init__(self, kind: str, message: str, line: int, column: int):
        super().__init__(f"{line}:{column}: {kind}: {message}")
        self.kind = kind
        self.line = line
        self.column = column


# -- number formatting ---------------------------------------------------------

_Q = Decimal("0.001")


def quantize(x: float) -> float:
    return float(format_float(x))


def format_float(x: float) -> str:
    """Three decimals, round-half-to-even on the shortest decimal repr of ``x``."""
    if not math.isfinite(x):
        raise ValueError(f"cannot emit non-finite value {x!r}")
    d = Decimal(repr(float(x))).quantize(_Q, rounding=ROUND_HALF_EVEN)
    if d.is_zero():
        d = Decimal("0.000")
    return f"{d:.3f}"


def format_angle(x: float) -> str:
    s = format_float(x % 360.0)
    return "0.000" if s == "360.000" else s


# -- emission ------------------------------------------------------------------

def _fmt_appearance(a) -> str:
    if a is None or isinstance(a, np.ndarray):
        return CLIP_LITERAL
    return str(int(a))


def emit_program(p: SceneProgram) -> str:
    a = p.attributes
    lines = []
    for name in SCALAR_SETTERS:
        v = getattr(a, name)
        lines.append(f"set_{name}({format_angle(v) if name == 'sun_rotation' else format_float(v)})")
    lines.append(f"set_ground({_fmt_appearance(a.ground)})")
    for o in p.objects:
        parts = []
        if o.pixels is not None:
            parts.append(f"pixels={int(o.pixels)}")
        x, y, z = o.loc
        parts.append(f"loc=({format_float(x)}, {format_float(y)}, {format_float(z)})")
        parts.append(f"height={format_float(o.height)}")
        parts.append(f"rotation={ROT_LITERAL}")
        parts.append(f"appearance={_fmt_appearance(o.appearance)}")
        lines.append(f"add({', '.join(parts)})")
    return "\n".join(lines) + "\n"


# -- parsing -------------------------------------------------------------------

_FLOAT = re.compile(r"-?\d+(?:\.\d+)?")
_INT = re.compile(r"\d+")
_SETTER = re.compile(r"set_([A-Za-z_]+)\(")


class _Cursor:
    def __init__(self, text: str, lineno: int):
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def fail(self, kind: str, message: str, pos: int | None = None):
        raise ParseError(kind, message, self.lineno, (self.pos if pos is None else pos) + 1)

    def peek(self, literal: str) -> bool:
        return self.text.startswith(literal, self.pos)

    def expect(self, literal: str):
        if not self.peek(literal):
            got = self.text[self.pos:self.pos + len(literal)] or "end of line"
            self.fail("Syntax", f"expected {literal!r}, got {got!r}")
        self.pos += len(literal)

    def number(self) -> float:
        m = _FLOAT.match(self.text, self.pos)
        # a number glued to more digits/dots/letters is malformed, e.g. 1.2.3 or 1e5
        if not m or (m.end() < len(self.text) and re.match(r"[\w.]", self.text[m.end()])):
            self.fail("MalformedFloat", f"bad number near {self.text[self.pos:self.pos + 12]!r}")
        self.pos = m.end()
        return float(m.group())

    def integer(self) -> int:
        m = _INT.match(self.text, self.pos)
        if not m or (m.end() < len(self.text) and re.match(r"[\w.]", self.text[m.end()])):
            self.fail("MalformedInteger", f"bad integer near {self.text[self.pos:self.pos + 12]!r}")
        self.pos = m.end()
        return int(m.group())

    def end(self):
        if self.pos != len(self.text):
            self.fail("Syntax", f"trailing text {self.text[self.pos:]!r}")


def _parse_appearance(c: _Cursor, discrete: bool | None):
    if c.peek(CLIP_LITERAL):
        if discrete:
            c.fail("Profile", "[CLIP] slot in a discrete-name program")
        c.expect(CLIP_LITERAL)
        return None
    if discrete is False:
        c.fail("Profile", "integer asset name in a [CLIP] program")
    return c.integer()


def parse_program(text: str, profile: Profile | None = None) -> SceneProgram:
    """Parse ``.rawcode`` text. With ``profile=None`` the profile is inferred
    from ``set_ground`` and the first ``add`` line and then enforced."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    want_pixels = None if profile is None else profile.pixels
    discrete = None if profile is None else profile.discrete

    values: dict[str, float] = {}
    ground = None
    objects: list[ObjectRecord] = []
    n_setters = 0
    lineno = 0
    for lineno, line in enumerate(lines, start=1):
        c = _Cursor(line, lineno)
        if n_setters < len(SETTERS):
            m = _SETTER.match(line)
            if not m:
                if line.startswith("add("):
                    c.fail("MissingSetter", f"expected set_{SETTERS[n_setters]} before objects")
                c.fail("Syntax", "expected a set_<name>(...) statement")
            name = m.group(1)
            if name not in SETTERS:
                c.fail("UnknownSetter", f"unknown setter set_{name}")
            if name != SETTERS[n_setters]:
                if name in SETTERS[:n_setters]:
                    c.fail("OutOfOrderSetter", f"set_{name} repeated or out of order")
                expected = f"set_{SETTERS[n_setters]}("
                if any(ln.startswith(expected) for ln in lines[lineno:]):
                    c.fail("OutOfOrderSetter", f"set_{name} before set_{SETTERS[n_setters]}")
                c.fail("MissingSetter", f"missing set_{SETTERS[n_setters]}")
            c.pos = m.end()
            if name == "ground":
                ground = _parse_appearance(c, discrete)
                discrete = ground is not None
            else:
                values[name] = c.number()
            c.expect(")")
            c.end()
            n_setters += 1
            continue

        if _SETTER.match(line):
            m = _SETTER.match(line)
            if m.group(1) in SETTERS:
                c.fail("OutOfOrderSetter", f"set_{m.group(1)} after set_ground")
            c.fail("UnknownSetter", f"unknown setter set_{m.group(1)}")
        c.expect("add(")
        pixels = None
        if want_pixels is None:
            want_pixels = c.peek("pixels=")
        if want_pixels:
            c.expect("pixels=")
            pixels = c.integer()
            c.expect(", ")
        elif c.peek("pixels="):
            c.fail("Profile", "pixels field in a no-pixels program")
        c.expect("loc=(")
        x = c.number()
        c.expect(", ")
        y = c.number()
        c.expect(", ")
        z = c.number()
        c.expect("), height=")
        height = c.number()
        c.expect(", rotation=")
        c.expect(ROT_LITERAL)
        c.expect(", appearance=")
        appearance = _parse_appearance(c, discrete)
        c.expect(")")
        c.end()
        if len(objects) == MAX_OBJECTS:
            c.fail("TooManyObjects", f"more than {MAX_OBJECTS} objects", pos=0)
        objects.append(ObjectRecord(loc=(x, y, z), height=height, pixels=pixels, appearance=appearance))

    if n_setters < len(SETTERS):
        raise ParseError("MissingSetter", f"missing set_{SETTERS[n_setters]}", lineno + 1, 1)
    attrs = SceneAttributes(**values, ground=ground)
    return SceneProgram(attrs, tuple(objects))


# -- validation & ordering -----------------------------------------------------

def _check_vector(v, name: str, dims: set, out: list):
    if isinstance(v, np.ndarray):
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            out.append(Diagnostic(name, "embedding must be a finite vector"))
        else:
            dims.add(v.shape[0])
    elif v is not None and not isinstance(v, (int, np.integer)):
        out.append(Diagnostic(name, "appearance must be an embedding, an asset id or unresolved"))
    elif isinstance(v, (int, np.integer)) and v < 0:
        out.append(Diagnostic(name, "asset id must be non-negative"))


def validate(p: SceneProgram) -> list[Diagnostic]:
    out: list[Diagnostic] = []
    a = p.attributes
    for name in SCALAR_SETTERS:
        v = getattr(a, name)
        if not math.isfinite(v):
            out.append(Diagnostic(name, "not finite"))
        elif name in NON_NEGATIVE and v < 0:
            out.append(Diagnostic(name, "must be >= 0"))
    if math.isfinite(a.sun_rotation) and not 0.0 <= a.sun_rotation < 360.0:
        out.append(Diagnostic("sun_rotation", "must lie in [0, 360)"))
    dims: set[int] = set()
    _check_vector(a.ground, "ground", dims, out)
    if len(p.objects) > MAX_OBJECTS:
        out.append(Diagnostic("objects", f"more than {MAX_OBJECTS} objects"))
    for i, o in enumerate(p.objects):
        f = f"objects[{i}]"
        if o.pixels is not None and (not isinstance(o.pixels, (int, np.integer)) or o.pixels < 0):
            out.append(Diagnostic(f"{f}.pixels", "must be a non-negative integer"))
        if len(o.loc) != 3 or not all(math.isfinite(v) for v in o.loc):
            out.append(Diagnostic(f"{f}.loc", "must be three finite values"))
        if not (math.isfinite(o.height) and o.height > 0):
            out.append(Diagnostic(f"{f}.height", "must be > 0"))
        if o.rotation is not None and not rotmath.is_rotation(o.rotation, tol=1e-6):
            out.append(Diagnostic(f"{f}.rotation", "not-SO3"))
        _check_vector(o.appearance, f"{f}.appearance", dims, out)
    if len(dims) > 1:
        out.append(Diagnostic("appearance", f"inconsistent embedding dimensions {sorted(dims)}"))
    pix = [o.pixels for o in p.objects]
    if any(v is None for v in pix) and not all(v is None for v in pix):
        out.append(Diagnostic("pixels", "present on some objects only"))
    elif all(v is not None for v in pix) and any(a_ < b_ for a_, b_ in itertools.pairwise(pix)):
        out.append(Diagnostic("objects", "ordering"))
    return out


def order_by_saliency(p: SceneProgram) -> SceneProgram:
    return replace(p, objects=tuple(sorted(p.objects, key=lambda o: -o.pixels)))


# -- helpers -------------------------------------------------------------------

def quantize_program(p: SceneProgram) -> SceneProgram:
    """Round every text-carried float the way emission does."""
    a = p.attributes
    vals = [quantize(getattr(a, k)) for k in SCALAR_SETTERS]
    i = SCALAR_SETTERS.index("sun_rotation")
    vals[i] = float(format_angle(a.sun_rotation))
    objs = tuple(
        replace(o, loc=tuple(quantize(v) for v in o.loc), height=quantize(o.height))
        for o in p.objects
    )
    return SceneProgram(a.with_scalars(vals), objs)


def strip_slots(p: SceneProgram) -> SceneProgram:
    """Drop rotation and embedding payloads (what the text alone carries)."""
    a = p.attributes
    g = a.ground if isinstance(a.ground, (int, np.integer)) else None
    objs = tuple(
        replace(o, rotation=None, appearance=o.appearance if isinstance(o.appearance, (int, np.integer)) else None)
        for o in p.objects
    )
    return SceneProgram(replace(a, ground=g), objs)


def strip_pixels(p: SceneProgram) -> SceneProgram:
    return replace(p, objects=tuple(replace(o, pixels=None) for o in p.objects))


def to_discrete(p: SceneProgram, asset_ids, ground_id: int) -> SceneProgram:
    objs = tuple(replace(o, appearance=int(i)) for o, i in zip(p.objects, asset_ids, strict=True))
    return SceneProgram(replace(p.attributes, ground=int(ground_id)), objs)


def _same(a, b, atol: float) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)) or a.shape != b.shape:
            return False
        return bool(np.allclose(a, b, rtol=0.0, atol=atol))
    if isinstance(a, (int, np.integer)) and isinstance(b, (int, np.integer)):
        return int(a) == int(b)
    return abs(float(a) - float(b)) <= atol


def programs_equal(p: SceneProgram, q: SceneProgram, atol: float = 0.0) -> bool:
    """Field-wise equality; ``atol`` applies to every float, including payloads."""
    if len(p.objects) != len(q.objects):
        return False
    for name in SETTERS:
        if not _same(getattr(p.attributes, name), getattr(q.attributes, name), atol):
            return False
    for a, b in zip(p.objects, q.objects):
        if a.pixels != b.pixels or not _same(a.height, b.height, atol):
            return False
        if not all(_same(u, v, atol) for u, v in zip(a.loc, b.loc)):
            return False
        if not _same(a.rotation, b.rotation, atol) or not _same(a.appearance, b.appearance, atol):
            return False
    return True
