"""
Text assembly for unit programs.

Grammar, one statement per line, ``;`` to end of line is a comment::

    .kernel outer_reps=<n>
    .unit pe <r> <c> | mobw <r> | mobn <c>
    .segment repeat=<n> [base=<addr>] [stride_i=<n>] [count_i=<n>] [stride_o=<n>]
    <mnemonic> [operand {, operand}]

Destinations: null out_h out_v acc rf0..rf7.
Sources: n s e w acc zero rf0..rf7, or ``#<value>`` for the immediate.

    mac4 acc, w, n
    mov out_h, w
    sra rf0, acc, #7
    ldi rf1, #-3
    load
    store s

Units without a ``.unit`` block get an empty program. The disassembler emits
canonical text: units in canonical order, empty units and zero AGU fields
omitted, so ``assemble(disassemble(img)) == img`` byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from . import isa
from .fabric import UNITS, MobN, MobW, NodeId, PE
from .isa import (
    SHAPES,
    AguConfig,
    DstSel,
    Instruction,
    Opcode,
    Segment,
    SrcSel,
    UnitProgram,
    legal_on,
    pack_image,
    unpack_image,
    validate_program,
)


class AsmError(ValueError):
    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.message = message


class AsmSyntaxError(AsmError):
    pass


class UnknownMnemonic(AsmError):
    pass


class OperandArity(AsmError):
    pass


class KindViolation(AsmError):
    pass


class DuplicateUnit(AsmError):
    pass


class ProgramError(AsmError):
    """A program-level rule (segment count, context length, operand legality) is broken."""


class ImageTooLarge(AsmError):
    def __init__(self, line: int, col: int, actual_size: int):
        super().__init__(line, col, f"context image is {actual_size} bytes, "
                                    f"limit {isa.CONTEXT_MEMORY_BYTES}")
        self.actual_size = actual_size


MNEMONICS = {op.name.lower(): op for op in Opcode}
SRC_NAMES = {"n": SrcSel.N, "s": SrcSel.S, "e": SrcSel.E, "w": SrcSel.W,
             "acc": SrcSel.ACC, "zero": SrcSel.ZERO,
             **{f"rf{i}": SrcSel(8 + i) for i in range(8)}}
DST_NAMES = {"null": DstSel.NULL, "out_h": DstSel.OUT_H, "out_v": DstSel.OUT_V,
             "acc": DstSel.ACC, **{f"rf{i}": DstSel(8 + i) for i in range(8)}}
SEGMENT_KEYS = {"repeat": "repeat", "base": "base", "stride_i": "stride_inner",
                "count_i": "count_inner", "stride_o": "stride_outer"}

_TOKEN = re.compile(r"[^\s,]+")


@dataclass
class _Tok:
    text: str
    col: int


def _tokens(text: str) -> list[_Tok]:
    return [_Tok(m.group(), m.start() + 1) for m in _TOKEN.finditer(text)]


def _int(tok: _Tok, line: int, what: str) -> int:
    try:
        return int(tok.text, 0)
    except ValueError:
        raise AsmSyntaxError(line, tok.col, f"expected {what}, got {tok.text!r}") from None


@dataclass
class _SegmentSrc:
    line: int
    repeat: int
    agu: AguConfig
    instrs: list[tuple[Instruction, int]] = field(default_factory=list)


@dataclass
class _UnitSrc:
    node: NodeId
    line: int
    segments: list[_SegmentSrc] = field(default_factory=list)


def _parse_unit(toks: list[_Tok], line: int) -> NodeId:
    if not toks:
        raise AsmSyntaxError(line, 1, "expected 'pe <r> <c>', 'mobw <r>' or 'mobn <c>'")
    kind = toks[0].text.lower()
    nargs = {"pe": 2, "mobw": 1, "mobn": 1}.get(kind)
    if nargs is None:
        raise AsmSyntaxError(line, toks[0].col, f"expected pe, mobw or mobn, got {toks[0].text!r}")
    if len(toks) != 1 + nargs:
        col = toks[min(len(toks) - 1, nargs + 1)].col if len(toks) > nargs else toks[-1].col
        raise AsmSyntaxError(line, col, f"{kind} takes {nargs} coordinate(s)")
    coords = [_int(t, line, "coordinate") for t in toks[1:]]
    try:
        return PE(*coords) if kind == "pe" else (MobW if kind == "mobw" else MobN)(*coords)
    except ValueError as exc:
        raise AsmSyntaxError(line, toks[1].col, str(exc)) from None


def _parse_keyvals(toks: list[_Tok], line: int, allowed: dict) -> dict:
    out = {}
    for t in toks:
        key, eq, val = t.text.partition("=")
        if not eq or key not in allowed:
            raise AsmSyntaxError(line, t.col, f"expected one of {', '.join(k + '=' for k in allowed)}")
        if allowed[key] in out:
            raise AsmSyntaxError(line, t.col, f"{key} given twice")
        out[allowed[key]] = _int(_Tok(val, t.col + len(key) + 1), line, f"number for {key}")
    return out


def _parse_instruction(text: str, line: int, unit: NodeId, col0: int) -> Instruction:
    mnem_m = _TOKEN.match(text)
    if mnem_m is None:
        raise AsmSyntaxError(line, col0, f"expected a mnemonic, got {text.split()[0]!r}")
    mnem = mnem_m.group()
    op = MNEMONICS.get(mnem.lower())
    if op is None:
        raise UnknownMnemonic(line, col0, f"unknown mnemonic {mnem!r}")
    if not legal_on(op, unit.kind):
        raise KindViolation(line, col0,
                            f"{op.name} illegal on {'PE' if unit.is_pe else 'MOB'} ({unit})")

    rest = text[mnem_m.end():]
    operands: list[_Tok] = []
    if rest.strip():
        offset = col0 + mnem_m.end()
        pos = 0
        for part in rest.split(","):
            stripped = part.strip()
            col = offset + pos + (len(part) - len(part.lstrip()))
            if not stripped or len(stripped.split()) != 1:
                raise AsmSyntaxError(line, col, "expected a single operand between commas")
            operands.append(_Tok(stripped, col))
            pos += len(part) + 1

    shape = SHAPES[op]
    want = int(shape.dst) + shape.nsrc + (1 if shape.imm else 0)
    if len(operands) != want:
        col = operands[want].col if len(operands) > want else col0
        raise OperandArity(line, col, f"{mnem.lower()} takes {want} operand(s), got {len(operands)}")

    it = iter(operands)
    dst = DstSel.NULL
    if shape.dst:
        t = next(it)
        if t.text.lower() not in DST_NAMES:
            raise AsmSyntaxError(line, t.col, f"expected destination, got {t.text!r}")
        dst = DST_NAMES[t.text.lower()]
    srcs: list[SrcSel] = []
    imm: Optional[int] = None
    for _ in range(shape.nsrc):
        t = next(it)
        if t.text.startswith("#"):
            v = _imm(t, line)
            if imm is not None and v != imm:
                raise AsmSyntaxError(line, t.col, "an instruction holds a single immediate")
            imm = v
            srcs.append(SrcSel.IMM)
        elif t.text.lower() in SRC_NAMES:
            srcs.append(SRC_NAMES[t.text.lower()])
        else:
            raise AsmSyntaxError(line, t.col, f"expected source, got {t.text!r}")
    if shape.imm:
        t = next(it)
        if not t.text.startswith("#"):
            raise AsmSyntaxError(line, t.col, f"expected #immediate, got {t.text!r}")
        v = _imm(t, line)
        if imm is not None and v != imm:
            raise AsmSyntaxError(line, t.col, "an instruction holds a single immediate")
        imm = v
    srcs += [SrcSel.N] * (2 - len(srcs))
    return Instruction(op, dst, srcs[0], srcs[1], imm or 0)


def _imm(t: _Tok, line: int) -> int:
    v = _int(_Tok(t.text[1:], t.col + 1), line, "immediate")
    if not -128 <= v <= 127:
        raise AsmSyntaxError(line, t.col, f"immediate {v} outside -128..127")
    return v


def parse(source: str) -> tuple[list[UnitProgram], int]:
    """Parse and validate assembly; returns the 24 programs and outer_reps."""
    outer_reps = 1
    kernel_line: Optional[int] = None
    units: dict[NodeId, _UnitSrc] = {}
    cur_unit: Optional[_UnitSrc] = None
    cur_seg: Optional[_SegmentSrc] = None

    for lineno, raw in enumerate(source.splitlines(), 1):
        text = raw.split(";", 1)[0].rstrip()
        if not text.strip():
            continue
        col0 = len(text) - len(text.lstrip()) + 1
        body = text.strip()
        if body.startswith("."):
            toks = _tokens(text)
            word = toks[0].text
            args = toks[1:]
            if word == ".kernel":
                if kernel_line is not None:
                    raise AsmSyntaxError(lineno, col0, f".kernel already given on line {kernel_line}")
                if units:
                    raise AsmSyntaxError(lineno, col0, ".kernel must precede every .unit")
                kv = _parse_keyvals(args, lineno, {"outer_reps": "outer_reps"})
                outer_reps = kv.get("outer_reps", 1)
                if not 1 <= outer_reps < 1 << 16:
                    raise AsmSyntaxError(lineno, args[0].col if args else col0,
                                         f"outer_reps {outer_reps} not in 1..65535")
                kernel_line = lineno
            elif word == ".unit":
                node = _parse_unit(args, lineno)
                if node in units:
                    raise DuplicateUnit(lineno, col0,
                                        f"{node} already defined on line {units[node].line}")
                cur_unit = units[node] = _UnitSrc(node, lineno)
                cur_seg = None
            elif word == ".segment":
                if cur_unit is None:
                    raise AsmSyntaxError(lineno, col0, ".segment outside a .unit block")
                kv = _parse_keyvals(args, lineno, SEGMENT_KEYS)
                repeat = kv.pop("repeat", 1)
                try:
                    agu = AguConfig(**kv)
                except TypeError as exc:  # pragma: no cover - keys are whitelisted
                    raise AsmSyntaxError(lineno, col0, str(exc)) from None
                cur_seg = _SegmentSrc(lineno, repeat, agu)
                cur_unit.segments.append(cur_seg)
            else:
                raise AsmSyntaxError(lineno, col0, f"unknown directive {word!r}")
            continue
        if cur_seg is None or cur_unit is None:
            raise AsmSyntaxError(lineno, col0, "instruction outside a .segment")
        cur_seg.instrs.append((_parse_instruction(body, lineno, cur_unit.node, col0), lineno))

    programs = []
    for node in UNITS:
        src = units.get(node)
        if src is None:
            programs.append(UnitProgram(node))
            continue
        for seg in src.segments:
            if not seg.instrs:
                raise ProgramError(seg.line, 1, "segment has no instructions")
        prog = UnitProgram(node, tuple(
            Segment(tuple(i for i, _ in s.instrs), s.repeat, s.agu) for s in src.segments))
        for v in validate_program(prog):
            line = src.line
            if v.segment is not None and v.segment < len(src.segments):
                seg = src.segments[v.segment]
                line = seg.line
                if v.slot is not None:
                    line = seg.instrs[v.slot][1]
            raise ProgramError(line, 1, str(v))
        programs.append(prog)
    return programs, outer_reps


def assemble(source: str) -> bytes:
    programs, outer_reps = parse(source)
    size = isa.image_size(programs)
    if size > isa.CONTEXT_MEMORY_BYTES:
        raise ImageTooLarge(max(1, len(source.splitlines())), 1, size)
    return pack_image(programs, outer_reps)


# -- disassembly ----------------------------------------------------------------

_SRC_TEXT = {v: k for k, v in SRC_NAMES.items()}
_DST_TEXT = {v: k for k, v in DST_NAMES.items()}


def format_instruction(instr: Instruction) -> str:
    shape = SHAPES[instr.opcode]
    ops = []
    if shape.dst:
        ops.append(_DST_TEXT[instr.dst])
    for s in instr.sources:
        ops.append(f"#{instr.imm}" if s is SrcSel.IMM else _SRC_TEXT[s])
    if shape.imm:
        ops.append(f"#{instr.imm}")
    name = instr.opcode.name.lower()
    return f"{name} {', '.join(ops)}" if ops else name


def _unit_directive(node: NodeId) -> str:
    if node.is_pe:
        return f".unit pe {node.row} {node.col}"
    if node.kind.value == "mobw":
        return f".unit mobw {node.row}"
    return f".unit mobn {node.col}"


def disassemble(image: bytes) -> str:
    programs, outer_reps = unpack_image(image)
    lines = [f".kernel outer_reps={outer_reps}"]
    for prog in programs:
        if not prog.segments:
            continue
        lines.append("")
        lines.append(_unit_directive(prog.unit))
        for seg in prog.segments:
            head = f".segment repeat={seg.repeat}"
            a = seg.agu
            if a.base:
                head += f" base=0x{a.base:x}"
            if a.stride_inner:
                head += f" stride_i={a.stride_inner}"
            if a.count_inner:
                head += f" count_i={a.count_inner}"
            if a.stride_outer:
                head += f" stride_o={a.stride_outer}"
            lines.append(head)
            lines.extend(f"    {format_instruction(i)}" for i in seg.context)
    return "\n".join(lines) + "\n"
