"""
Instruction set, per-unit static programs and the context-image format.

Instruction word (32 bit)::

    31..27 opcode | 26..23 dst | 22..19 src_a | 18..15 src_b | 14..7 imm | 6..0 zero

Fields an opcode does not use must be zero; that canonical form is what makes
images byte-comparable.

Context image (little endian)::

    "CGR1" | version u16 | unit_count u16 | outer_reps u16 | 6 reserved bytes
    24 x unit block:
        unit_id u8 | segment_count u8 | reserved u16
        per segment: repeat u16, ctx_len u8, flags u8, agu_base u32,
                     agu_stride_inner i16, agu_count_inner u16,
                     agu_stride_outer i16, reserved u16
                     followed by ctx_len instruction words
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

from .fabric import NUM_UNITS, UNITS, Kind, NodeId, Port, unit_from_index

CONTEXT_MEMORY_BYTES = 4096
MAGIC = b"CGR1"
VERSION = 1
MAX_SEGMENTS = 4
MAX_CONTEXT = 8

HEADER = struct.Struct("<4sHHH6s")
UNIT_HEADER = struct.Struct("<BBH")
SEGMENT_HEADER = struct.Struct("<HBBIhHhH")
WORD = struct.Struct("<I")


class Opcode(IntEnum):
    NOP = 0
    MOV = 1
    ADD = 2
    SUB = 3
    MUL = 4
    MAC4 = 5
    DRN = 6
    SRA = 7
    CLAMP8 = 8
    LDI = 9
    LOAD = 10
    STORE = 11


class SrcSel(IntEnum):
    N = 0
    S = 1
    E = 2
    W = 3
    ACC = 4
    ZERO = 5
    IMM = 6
    RF0 = 8
    RF1 = 9
    RF2 = 10
    RF3 = 11
    RF4 = 12
    RF5 = 13
    RF6 = 14
    RF7 = 15


class DstSel(IntEnum):
    NULL = 0
    OUT_H = 1
    OUT_V = 2
    ACC = 3
    RF0 = 8
    RF1 = 9
    RF2 = 10
    RF3 = 11
    RF4 = 12
    RF5 = 13
    RF6 = 14
    RF7 = 15


PORT_SOURCES = {SrcSel.N: Port.N, SrcSel.S: Port.S, SrcSel.E: Port.E, SrcSel.W: Port.W}


@dataclass(frozen=True)
class OperandShape:
    dst: bool
    nsrc: int
    imm: Optional[str] = None  # "shift" or "value" when the imm field is an operand


SHAPES: dict[Opcode, OperandShape] = {
    Opcode.NOP: OperandShape(False, 0),
    Opcode.MOV: OperandShape(True, 1),
    Opcode.ADD: OperandShape(True, 2),
    Opcode.SUB: OperandShape(True, 2),
    Opcode.MUL: OperandShape(True, 2),
    Opcode.MAC4: OperandShape(True, 2),
    Opcode.DRN: OperandShape(False, 0),
    Opcode.SRA: OperandShape(True, 1, "shift"),
    Opcode.CLAMP8: OperandShape(True, 1),
    Opcode.LDI: OperandShape(True, 0, "value"),
    Opcode.LOAD: OperandShape(False, 0),
    Opcode.STORE: OperandShape(False, 1),
}

PE_ONLY = frozenset({Opcode.MAC4, Opcode.DRN, Opcode.SRA, Opcode.CLAMP8, Opcode.LDI})
MOB_ONLY = frozenset({Opcode.LOAD, Opcode.STORE})


def legal_on(opcode: Opcode, kind: Kind) -> bool:
    if kind is Kind.PE:
        return opcode not in MOB_ONLY
    return opcode not in PE_ONLY


# -- errors -------------------------------------------------------------------


class IsaError(ValueError):
    pass


class IllegalOpcode(IsaError):
    def __init__(self, code: int):
        super().__init__(f"illegal opcode {code} in bits [31:27]")
        self.code = code


class IllegalSelector(IsaError):
    def __init__(self, field_name: str, code: int, bits: tuple[int, int]):
        super().__init__(f"reserved {field_name} selector {code} in bits [{bits[0]}:{bits[1]}]")
        self.field = field_name
        self.code = code
        self.bits = bits


class NonCanonical(IsaError):
    def __init__(self, message: str, bits: Optional[tuple[int, int]] = None,
                 offset: Optional[int] = None):
        where = ""
        if bits is not None:
            where = f" (bits [{bits[0]}:{bits[1]}])"
        if offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(f"non-canonical: {message}{where}")
        self.bits = bits
        self.offset = offset


class ImageTooLarge(IsaError):
    def __init__(self, actual_size: int):
        super().__init__(f"context image is {actual_size} bytes, limit {CONTEXT_MEMORY_BYTES}")
        self.actual_size = actual_size


class MissingUnit(IsaError):
    pass


class DuplicateUnit(IsaError):
    pass


class BadMagic(IsaError):
    pass


class BadVersion(IsaError):
    pass


class Truncated(IsaError):
    def __init__(self, offset: int, needed: int):
        super().__init__(f"image truncated at byte offset {offset} (need {needed} more bytes)")
        self.offset = offset


class InvalidProgram(IsaError):
    def __init__(self, violations: Sequence[Violation]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = list(violations)


# -- value types ----------------------------------------------------------------


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dst: DstSel = DstSel.NULL
    src_a: SrcSel = SrcSel.N
    src_b: SrcSel = SrcSel.N
    imm: int = 0

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        object.__setattr__(self, "dst", DstSel(self.dst))
        object.__setattr__(self, "src_a", SrcSel(self.src_a))
        object.__setattr__(self, "src_b", SrcSel(self.src_b))
        if not -128 <= self.imm <= 127:
            raise ValueError(f"imm {self.imm} outside signed 8-bit range")

    @property
    def sources(self) -> tuple[SrcSel, ...]:
        return (self.src_a, self.src_b)[: SHAPES[self.opcode].nsrc]

    @property
    def reads_imm(self) -> bool:
        return SHAPES[self.opcode].imm is not None or SrcSel.IMM in self.sources

    def canonical_errors(self) -> list[str]:
        shape = SHAPES[self.opcode]
        problems = []
        if not shape.dst and self.dst != 0:
            problems.append("dst")
        if shape.nsrc < 1 and self.src_a != 0:
            problems.append("src_a")
        if shape.nsrc < 2 and self.src_b != 0:
            problems.append("src_b")
        if not self.reads_imm and self.imm != 0:
            problems.append("imm")
        return problems


@dataclass(frozen=True)
class AguConfig:
    """Address stream of a MOB segment. ``count_inner == 0`` marks an unused AGU."""

    base: int = 0
    stride_inner: int = 0
    count_inner: int = 0
    stride_outer: int = 0

    def address(self, k: int, outer: int) -> int:
        return self.base + (k % self.count_inner) * self.stride_inner + outer * self.stride_outer

    def range_errors(self) -> list[str]:
        problems = []
        if not 0 <= self.base < 1 << 32:
            problems.append(f"agu base {self.base} not u32")
        for name in ("stride_inner", "stride_outer"):
            v = getattr(self, name)
            if not -(1 << 15) <= v < 1 << 15:
                problems.append(f"agu {name} {v} not i16")
        if not 0 <= self.count_inner < 1 << 16:
            problems.append(f"agu count_inner {self.count_inner} not u16")
        return problems


@dataclass(frozen=True)
class Segment:
    context: tuple[Instruction, ...]
    repeat: int = 1
    agu: AguConfig = field(default_factory=AguConfig)

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(self.context))

    @property
    def duration(self) -> int:
        return len(self.context) * self.repeat


@dataclass(frozen=True)
class UnitProgram:
    unit: NodeId
    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def iteration_length(self) -> int:
        return sum(s.duration for s in self.segments)


@dataclass(frozen=True)
class Violation:
    unit: NodeId
    segment: Optional[int]
    slot: Optional[int]
    reason: str

    def __str__(self):
        loc = str(self.unit)
        if self.segment is not None:
            loc += f" seg {self.segment}"
        if self.slot is not None:
            loc += f" slot {self.slot}"
        return f"{loc}: {self.reason}"


# -- instruction words ----------------------------------------------------------


def encode_instruction(instr: Instruction) -> int:
    return (
        (int(instr.opcode) << 27)
        | (int(instr.dst) << 23)
        | (int(instr.src_a) << 19)
        | (int(instr.src_b) << 15)
        | ((instr.imm & 0xFF) << 7)
    )


_SRC_CODES = frozenset(int(s) for s in SrcSel)
_DST_CODES = frozenset(int(d) for d in DstSel)


def decode_instruction(word: int) -> Instruction:
    word &= 0xFFFFFFFF
    op = word >> 27
    if op >= len(Opcode):
        raise IllegalOpcode(op)
    dst = (word >> 23) & 0xF
    if dst not in _DST_CODES:
        raise IllegalSelector("dst", dst, (26, 23))
    a = (word >> 19) & 0xF
    if a not in _SRC_CODES:
        raise IllegalSelector("src_a", a, (22, 19))
    b = (word >> 15) & 0xF
    if b not in _SRC_CODES:
        raise IllegalSelector("src_b", b, (18, 15))
    if word & 0x7F:
        raise NonCanonical("reserved bits set", (6, 0))
    imm = (word >> 7) & 0xFF
    if imm >= 128:
        imm -= 256
    instr = Instruction(Opcode(op), DstSel(dst), SrcSel(a), SrcSel(b), imm)
    bad = instr.canonical_errors()
    if bad:
        bits = {"dst": (26, 23), "src_a": (22, 19), "src_b": (18, 15), "imm": (14, 7)}[bad[0]]
        raise NonCanonical(f"unused field {bad[0]} of {instr.opcode.name} is nonzero", bits)
    return instr


# -- validation -----------------------------------------------------------------


def _source_error(src: SrcSel, unit: NodeId) -> Optional[str]:
    if src in PORT_SOURCES:
        if PORT_SOURCES[src] not in unit.ports:
            return f"source {src.name} has no port on {unit.kind.value}"
    elif not unit.is_pe and src not in (SrcSel.ZERO, SrcSel.IMM):
        return f"source {src.name} illegal on {unit.kind.value}"
    return None


def _instruction_errors(instr: Instruction, unit: NodeId) -> list[str]:
    op = instr.opcode
    if not legal_on(op, unit.kind):
        return [f"{op.name} illegal on {'PE' if unit.is_pe else 'MOB'}"]
    problems = [f"unused field {f} of {op.name} is nonzero" for f in instr.canonical_errors()]
    if SrcSel.IMM in (instr.src_a, instr.src_b) and SrcSel.IMM not in instr.sources:
        problems.append(f"IMM selected on a source {op.name} does not read")
    if op is Opcode.SRA:
        if instr.src_a is SrcSel.IMM:
            problems.append("SRA cannot take IMM as its value operand")
        if not 0 <= instr.imm <= 31:
            problems.append(f"SRA shift {instr.imm} outside 0..31")
    if op is Opcode.MAC4 and instr.dst is not DstSel.ACC:
        problems.append("MAC4 must target ACC")
    for src in instr.sources:
        err = _source_error(src, unit)
        if err:
            problems.append(err)
    if SHAPES[op].dst and not unit.is_pe and instr.dst not in (DstSel.NULL, DstSel.OUT_H, DstSel.OUT_V):
        problems.append(f"destination {instr.dst.name} illegal on {unit.kind.value}")
    return problems


def validate_program(program: UnitProgram) -> list[Violation]:
    """Every rule a program breaks; an empty list means the program is loadable."""
    unit = program.unit
    out: list[Violation] = []
    if len(program.segments) > MAX_SEGMENTS:
        out.append(Violation(unit, None, None,
                             f"segment count {len(program.segments)} > {MAX_SEGMENTS}"))
    for si, seg in enumerate(program.segments):
        n = len(seg.context)
        if not 1 <= n <= MAX_CONTEXT:
            out.append(Violation(unit, si, None, f"context length {n} not in 1..{MAX_CONTEXT}"))
        if not 1 <= seg.repeat < 1 << 16:
            out.append(Violation(unit, si, None, f"repeat {seg.repeat} not in 1..65535"))
        for reason in seg.agu.range_errors():
            out.append(Violation(unit, si, None, reason))
        if not unit.is_pe and seg.agu.count_inner == 0 and any(
                i.opcode in MOB_ONLY for i in seg.context):
            out.append(Violation(unit, si, None, "memory access with agu count_inner 0"))
        for slot, instr in enumerate(seg.context):
            for reason in _instruction_errors(instr, unit):
                out.append(Violation(unit, si, slot, reason))
    return out


# -- context image --------------------------------------------------------------


def _unit_block_size(program: UnitProgram) -> int:
    return UNIT_HEADER.size + sum(SEGMENT_HEADER.size + WORD.size * len(s.context)
                                  for s in program.segments)


def image_size(programs: Iterable[UnitProgram]) -> int:
    return HEADER.size + sum(_unit_block_size(p) for p in programs)


def _canonical_order(programs: Iterable[UnitProgram]) -> list[UnitProgram]:
    slots: list[Optional[UnitProgram]] = [None] * NUM_UNITS
    for p in programs:
        if slots[p.unit.index] is not None:
            raise DuplicateUnit(f"duplicate program for {p.unit}")
        slots[p.unit.index] = p
    missing = [str(UNITS[i]) for i, p in enumerate(slots) if p is None]
    if missing:
        raise MissingUnit(f"no program for {', '.join(missing)}")
    return slots  # type: ignore[return-value]


def pack_image(programs: Iterable[UnitProgram], outer_reps: int = 1) -> bytes:
    ordered = _canonical_order(programs)
    if not 1 <= outer_reps < 1 << 16:
        raise IsaError(f"outer_reps {outer_reps} not in 1..65535")
    violations = [v for p in ordered for v in validate_program(p)]
    if violations:
        raise InvalidProgram(violations)
    size = image_size(ordered)
    if size > CONTEXT_MEMORY_BYTES:
        raise ImageTooLarge(size)

    out = bytearray(HEADER.pack(MAGIC, VERSION, NUM_UNITS, outer_reps, bytes(6)))
    for p in ordered:
        out += UNIT_HEADER.pack(p.unit.index, len(p.segments), 0)
        for seg in p.segments:
            a = seg.agu
            out += SEGMENT_HEADER.pack(seg.repeat, len(seg.context), 0, a.base,
                                       a.stride_inner, a.count_inner, a.stride_outer, 0)
            for instr in seg.context:
                out += WORD.pack(encode_instruction(instr))
    assert len(out) == size
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, s: struct.Struct) -> tuple:
        end = self.pos + s.size
        if end > len(self.data):
            raise Truncated(len(self.data), end - len(self.data))
        fields = s.unpack_from(self.data, self.pos)
        self.pos = end
        return fields


def unpack_image(data: bytes) -> tuple[list[UnitProgram], int]:
    """Inverse of :func:`pack_image`. Structural checks only; see :func:`validate_program`."""
    r = _Reader(bytes(data))
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r} at byte offset 0")
    magic, version, count, outer_reps, reserved = r.take(HEADER)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version} at byte offset 4")
    if count != NUM_UNITS:
        raise NonCanonical(f"unit_count {count} != {NUM_UNITS}", offset=6)
    if outer_reps == 0:
        raise NonCanonical("outer_reps is 0", offset=8)
    if reserved != bytes(6):
        raise NonCanonical("reserved header bytes nonzero", offset=10)

    programs = []
    for expect in range(NUM_UNITS):
        at = r.pos
        uid, nseg, res = r.take(UNIT_HEADER)
        if uid != expect:
            raise NonCanonical(f"unit id {uid} where {expect} expected", offset=at)
        if res:
            raise NonCanonical("reserved unit-block field nonzero", offset=at + 2)
        segments = []
        for _ in range(nseg):
            at = r.pos
            repeat, n, flags, base, s_in, cnt, s_out, res = r.take(SEGMENT_HEADER)
            if repeat == 0:
                raise NonCanonical("segment repeat 0", offset=at)
            if n == 0:
                raise NonCanonical("segment context length 0", offset=at + 2)
            if flags:
                raise NonCanonical("segment flags nonzero", offset=at + 3)
            if res:
                raise NonCanonical("reserved segment field nonzero", offset=at + 14)
            context = []
            for _ in range(n):
                at = r.pos
                (word,) = r.take(WORD)
                try:
                    context.append(decode_instruction(word))
                except IsaError as exc:
                    raise NonCanonical(f"instruction word 0x{word:08x}: {exc}",
                                       offset=at) from exc
            segments.append(Segment(tuple(context), repeat, AguConfig(base, s_in, cnt, s_out)))
        programs.append(UnitProgram(unit_from_index(uid), tuple(segments)))
    if r.pos != len(data):
        raise NonCanonical(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    return programs, outer_reps


@dataclass(frozen=True)
class ContextImage:
    programs: tuple[UnitProgram, ...]
    outer_reps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "programs", tuple(_canonical_order(self.programs)))

    def pack(self) -> bytes:
        return pack_image(self.programs, self.outer_reps)

    @classmethod
    def unpack(cls, data: bytes) -> ContextImage:
        programs, reps = unpack_image(data)
        return cls(tuple(programs), reps)

    @classmethod
    def empty(cls, outer_reps: int = 1) -> ContextImage:
        return cls(tuple(UnitProgram(u) for u in UNITS), outer_reps)

    def program(self, unit: NodeId) -> UnitProgram:
        return self.programs[unit.index]
