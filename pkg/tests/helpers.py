"""Shared builders for the test suite."""

import random
from pathlib import Path

from cgra.fabric import UNITS
from cgra.isa import SHAPES, DstSel, Instruction, Opcode, Segment, SrcSel, UnitProgram, pack_image

KERNEL_DIR = Path(__file__).parent / "kernels"


def image(programs=None, outer_reps=1) -> bytes:
    """Pack an image from ``{node: [Segment, ...]}``; other units stay empty."""
    programs = programs or {}
    return pack_image([UnitProgram(u, tuple(programs.get(u, ()))) for u in UNITS], outer_reps)


def seg(*instrs, repeat=1, agu=None):
    kw = {} if agu is None else {"agu": agu}
    return Segment(tuple(instrs), repeat, **kw)


def random_canonical_instruction(rng: random.Random) -> Instruction:
    op = rng.choice(list(Opcode))
    shape = SHAPES[op]
    dst = rng.choice(list(DstSel)) if shape.dst else DstSel.NULL
    srcs = [rng.choice(list(SrcSel)) for _ in range(shape.nsrc)]
    srcs += [SrcSel.N] * (2 - len(srcs))
    reads_imm = shape.imm is not None or SrcSel.IMM in srcs[:shape.nsrc]
    imm = rng.randint(-128, 127) if reads_imm else 0
    return Instruction(op, dst, srcs[0], srcs[1], imm)


def kernel_corpus() -> dict[str, str]:
    return {p.name: p.read_text() for p in sorted(KERNEL_DIR.glob("*.casm"))}
