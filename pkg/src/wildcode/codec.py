"""Scene programs as hybrid token streams.

Text is tokenized greedily against a small fixed vocabulary (statement
keywords with their punctuation, digits, sign and decimal point). ``[ROT]``
and ``[CLIP]`` become special ids, each paired with a continuous payload
carried alongside the ids: nine floats (row-major 3x3) for a rotation, ``d``
floats for an appearance embedding.

Binary layout (little-endian), see ``docs/formats.md``::

    magic  b"WCTS"     4 bytes
    version u16, reserved u16
    dim u32, n_tokens u32, n_slots u32
    tokens  u32[n_tokens]
    payloads f32, one block per slot in occurrence order (9 or dim floats)
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from wildcode import rotmath
from wildcode.scenelang import (
    CLIP_LITERAL,
    ROT_LITERAL,
    SCALAR_SETTERS,
    ParseError,
    Profile,
    SceneProgram,
    emit_program,
    parse_program,
)

PAD, BOS, EOS, ROT, CLIP = range(5)
SPECIALS = ("<pad>", "<bos>", "<eos>", ROT_LITERAL, CLIP_LITERAL)

_TEXT_TOKENS = (
    *(f"set_{name}(" for name in SCALAR_SETTERS),
    "set_ground(",
    ")\n",
    "add(",
    "pixels=",
    "loc=(",
    ", loc=(",
    ", ",
    "), height=",
    ", rotation=",
    ", appearance=",
    ")",
    "-",
    ".",
    *"0123456789",
)

MAGIC = b"WCTS"
VERSION = 1
_HEADER = struct.Struct("<4sHHIII")


class CodecError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class UnresolvedSlotError(ValueError):
    pass


class Vocabulary:
    def __init__(self, text_tokens=_TEXT_TOKENS):
        self.tokens = tuple(SPECIALS) + tuple(text_tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate vocabulary entry")
        alternatives = sorted(self.tokens[ROT:], key=len, reverse=True)
        self._lexer = re.compile("|".join(re.escape(t) for t in alternatives))

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, text: str) -> int:
        return self.ids[text]

    def tokenize(self, text: str) -> list[int]:
        out = []
        pos = 0
        while pos < len(text):
            m = self._lexer.match(text, pos)
            if not m:
                raise CodecError("UnknownText", f"cannot tokenize {text[pos:pos + 10]!r}")
            out.append(self.ids[m.group()])
            pos = m.end()
        return out

    def detokenize(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids)


VOCAB = Vocabulary()


@dataclass(eq=False)
class HybridTokenStream:
    tokens: list[int]
    slots: list[np.ndarray] = field(default_factory=list)

    def slot_positions(self) -> list[int]:
        return [i for i, t in enumerate(self.tokens) if t in (ROT, CLIP)]

    def counts(self) -> tuple[int, int]:
        """(ROT occurrences, CLIP occurrences)."""
        return self.tokens.count(ROT), self.tokens.count(CLIP)

    def consistent(self) -> bool:
        kinds = [t for t in self.tokens if t in (ROT, CLIP)]
        if len(kinds) != len(self.slots):
            return False
        dims = {s.shape[0] for k, s in zip(kinds, self.slots) if k == CLIP}
        return len(dims) <= 1 and all(s.shape == (9,) for k, s in zip(kinds, self.slots) if k == ROT)

    @property
    def dim(self) -> int:
        for t, s in zip((t for t in self.tokens if t in (ROT, CLIP)), self.slots):
            if t == CLIP:
                return int(s.shape[0])
        return 0

    def equals(self, other: HybridTokenStream, atol: float = 0.0) -> bool:
        if list(self.tokens) != list(other.tokens) or len(self.slots) != len(other.slots):
            return False
        return all(a.shape == b.shape and np.allclose(a, b, rtol=0.0, atol=atol) for a, b in zip(self.slots, other.slots))


def encode(p: SceneProgram, vocab: Vocabulary = VOCAB) -> HybridTokenStream:
    slots: list[np.ndarray] = []
    g = p.attributes.ground
    if g is None:
        raise UnresolvedSlotError("ground appearance is unresolved")
    if isinstance(g, np.ndarray):
        slots.append(np.asarray(g, dtype=np.float64))
    for i, o in enumerate(p.objects):
        if o.rotation is None:
            raise UnresolvedSlotError(f"objects[{i}].rotation is unresolved")
        if o.appearance is None:
            raise UnresolvedSlotError(f"objects[{i}].appearance is unresolved")
        slots.append(np.asarray(o.rotation, dtype=np.float64).reshape(9))
        if isinstance(o.appearance, np.ndarray):
            slots.append(np.asarray(o.appearance, dtype=np.float64))
    tokens = [BOS, *vocab.tokenize(emit_program(p)), EOS]
    return HybridTokenStream(tokens, slots)


def decode(s: HybridTokenStream, vocab: Vocabulary = VOCAB, profile: Profile | None = None) -> SceneProgram:
    tokens = list(s.tokens)
    if any(not 0 <= t < len(vocab) for t in tokens):
        raise CodecError("UnknownToken", "token id outside the vocabulary")
    if not tokens or tokens[0] != BOS:
        raise CodecError("Truncated", "stream does not start with BOS")
    if tokens[-1] != EOS or len(tokens) < 2:
        raise CodecError("Truncated", "stream does not end with EOS")
    body = tokens[1:-1]
    if any(t in (PAD, BOS, EOS) for t in body):
        raise CodecError("Grammar", "control token inside the stream body")
    kinds = [t for t in body if t in (ROT, CLIP)]
    if len(s.slots) < len(kinds):
        raise CodecError("SlotUnderflow", f"{len(kinds)} slot tokens but {len(s.slots)} payloads")
    if len(s.slots) > len(kinds):
        raise CodecError("SlotOverflow", f"{len(kinds)} slot tokens but {len(s.slots)} payloads")
    dims = set()
    for k, payload in zip(kinds, s.slots):
        payload = np.asarray(payload)
        if payload.ndim != 1 or (k == ROT and payload.shape[0] != 9):
            raise CodecError("SlotShape", f"bad payload shape {payload.shape}")
        if not np.all(np.isfinite(payload)):
            raise CodecError("SlotShape", "non-finite payload")
        if k == CLIP:
            dims.add(payload.shape[0])
    if len(dims) > 1:
        raise CodecError("SlotShape", f"mixed embedding dimensions {sorted(dims)}")

    try:
        prog = parse_program(vocab.detokenize(body), profile)
    except ParseError as e:
        raise CodecError("Grammar", str(e)) from e

    payloads = iter(np.asarray(x, dtype=np.float64) for x in s.slots)
    attrs = prog.attributes
    if attrs.ground is None:
        attrs = replace(attrs, ground=next(payloads))
    objects = []
    for o in prog.objects:
        rot = rotmath.symmetric_orthogonalize(next(payloads))
        app = o.appearance if o.appearance is not None else next(payloads)
        objects.append(replace(o, rotation=rot, appearance=app))
    return SceneProgram(attrs, tuple(objects))


# -- binary format ---------------------------------------------------------------

def to_bytes(s: HybridTokenStream) -> bytes:
    if not s.consistent():
        raise CodecError("SlotShape", "stream payloads do not match its slot tokens")
    head = _HEADER.pack(MAGIC, VERSION, 0, s.dim, len(s.tokens), len(s.slots))
    toks = np.asarray(s.tokens, dtype="<u4").tobytes()
    pay = b"".join(np.asarray(x, dtype="<f4").tobytes() for x in s.slots)
    return head + toks + pay


def from_bytes(data: bytes) -> HybridTokenStream:
    if len(data) < _HEADER.size:
        raise CodecError("Truncated", "short header")
    magic, version, _, dim, n_tok, n_slots = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CodecError("BadMagic", f"not a token stream file ({magic!r})")
    if version != VERSION:
        raise CodecError("BadVersion", f"unsupported version {version}")
    off = _HEADER.size
    if len(data) < off + 4 * n_tok:
        raise CodecError("Truncated", "token array cut short")
    tokens = np.frombuffer(data, dtype="<u4", count=n_tok, offset=off).astype(int).tolist()
    off += 4 * n_tok
    kinds = [t for t in tokens if t in (ROT, CLIP)]
    if len(kinds) != n_slots:
        raise CodecError("SlotUnderflow" if len(kinds) > n_slots else "SlotOverflow", "slot count mismatch")
    slots = []
    for k in kinds:
        n = 9 if k == ROT else dim
        if len(data) < off + 4 * n:
            raise CodecError("SlotUnderflow", "payload block cut short")
        slots.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64))
        off += 4 * n
    if off != len(data):
        raise CodecError("SlotOverflow", "trailing bytes after payloads")
    return HybridTokenStream(tokens, slots)


def write_stream(path, s: HybridTokenStream) -> None:
    Path(path).write_bytes(to_bytes(s))


def read_stream(path) -> HybridTokenStream:
    return from_bytes(Path(path).read_bytes())
