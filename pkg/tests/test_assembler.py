import struct

import pytest
from hypothesis import given, settings, strategies as st

from cgra.assembler import (
    AsmError,
    AsmSyntaxError,
    DuplicateUnit,
    ImageTooLarge,
    KindViolation,
    OperandArity,
    ProgramError,
    UnknownMnemonic,
    assemble,
    disassemble,
)
from cgra.fabric import PE
from cgra.isa import WORD, unpack_image
from cgra.mapper import GemmShape, kernel_image, plan_gemm
from helpers import kernel_corpus


def test_kernel_only_source_is_the_empty_image():
    img = assemble(".kernel outer_reps=1\n")
    assert len(img) == 112
    assert assemble("") == img


def test_mov_encoding():
    img = assemble(".unit pe 0 0\n.segment repeat=1\n  mov out_h, w\n")
    # header 16 + unit header 4 + segment header 16
    assert struct.unpack_from("<I", img, 36)[0] == 0x08980000


def test_empty_image_disassembly_omits_empty_units():
    assert disassemble(assemble("")) == ".kernel outer_reps=1\n"


def test_mac_kernel_disassembly():
    text = disassemble(assemble(kernel_corpus()["mac_example.casm"]))
    assert "    mac4 acc, w, n\n" in text
    assert ".segment repeat=1 base=0x4 stride_i=4 count_i=1\n" in text


@pytest.mark.parametrize("name", sorted(kernel_corpus()))
def test_corpus_round_trip(name):
    img = assemble(kernel_corpus()[name])
    text = disassemble(img)
    assert assemble(text) == img
    assert disassemble(assemble(text)) == text


@pytest.mark.parametrize("shape", [(4, 4, 16), (5, 7, 9), (16, 16, 32), (12, 8, 200)])
def test_mapper_kernels_round_trip(shape):
    plan = plan_gemm(GemmShape(*shape))
    for t in range(plan.launches):
        img = kernel_image(plan, t)
        assert assemble(disassemble(img)) == img


def test_immediates():
    img = assemble(".unit pe 1 1\n.segment\n ldi rf1, #-3\n sra rf0, acc, #7\n add rf2, #0x10, rf1\n")
    progs, _ = unpack_image(img)
    ldi, sra, add = progs[PE(1, 1).index].segments[0].context
    assert ldi.imm == -3 and sra.imm == 7 and add.imm == 16
    assert "add rf2, #16, rf1" in disassemble(img)


@pytest.mark.parametrize("src,exc,line,col", [
    (".unit pe 0 0\n.segment\n  frob rf0\n", UnknownMnemonic, 3, 3),
    (".unit pe 0 0\n.segment\n  load\n", KindViolation, 3, 3),
    (".unit mobw 0\n.segment\n mac4 acc, w, n\n", KindViolation, 3, 2),
    (".unit pe 0 0\n.segment\n  mov out_h\n", OperandArity, 3, 3),
    (".unit pe 0 0\n.segment\n  mov out_h, w, n\n", OperandArity, 3, 17),
    (".unit pe 0 0\n.segment\n  mov out_h, q\n", AsmSyntaxError, 3, 14),
    (".unit pe 0 0\n.segment\n  ldi rf0, #200\n", AsmSyntaxError, 3, 12),
    (".unit pe 0 0\n.unit pe 0 0\n", DuplicateUnit, 2, 1),
    ("  nop\n", AsmSyntaxError, 1, 3),
    (".unit pe 7 0\n", AsmSyntaxError, 1, 10),
    (".unit pe 0 0\n.segment repeat=x\n nop\n", AsmSyntaxError, 2, 17),
    (".unit pe 0 0\n.segment colour=3\n", AsmSyntaxError, 2, 10),
    (".bogus\n", AsmSyntaxError, 1, 1),
    (".unit pe 0 0\n.segment\n.segment\n nop\n", ProgramError, 2, 1),
    (".unit mobw 0\n.segment\n mov out_h, n\n", ProgramError, 3, 1),
    (".unit pe 0 0\n" + ".segment\n nop\n" * 5, ProgramError, 1, 1),
])
def test_diagnostics(src, exc, line, col):
    with pytest.raises(exc) as e:
        assemble(src)
    assert (e.value.line, e.value.col) == (line, col), str(e.value)


def test_image_too_large():
    units = [f"pe {r} {c}" for r in range(4) for c in range(4)]
    units += [f"mobw {r}" for r in range(4)] + [f"mobn {c}" for c in range(4)]
    body = "".join(f".unit {u}\n" + (".segment\n" + " nop\n" * 8) * 4 for u in units)
    with pytest.raises(ImageTooLarge) as e:
        assemble(body)
    assert e.value.actual_size == 16 + 24 * (4 + 4 * 48) == 4720


def test_comments_and_case():
    a = assemble("; hi\n.unit PE 0 0 ; c\n.segment repeat=2\n  MOV OUT_H, W ; c\n")
    b = assemble(".unit pe 0 0\n.segment repeat=2\n mov out_h, w\n")
    assert a == b


CORPUS = list(kernel_corpus().values())


@settings(max_examples=300)
@given(st.sampled_from(CORPUS), st.data())
def test_mutated_sources_never_crash(text, data):
    chars = list(text)
    for _ in range(data.draw(st.integers(1, 6))):
        pos = data.draw(st.integers(0, max(0, len(chars) - 1)))
        action = data.draw(st.sampled_from(["del", "ins", "swap"]))
        ch = data.draw(st.sampled_from(list("#,;.=-0123456789 \nabcdefghijklmnopqrstuvwxyz_x")))
        if action == "del" and chars:
            del chars[pos]
        elif action == "ins":
            chars.insert(pos, ch)
        elif chars:
            chars[pos] = ch
    try:
        assemble("".join(chars))
    except AsmError as exc:
        assert exc.line >= 1 and exc.col >= 1


@given(st.text(max_size=200))
def test_arbitrary_text_never_crashes(text):
    try:
        assemble(text)
    except AsmError as exc:
        assert exc.line >= 1 and exc.col >= 1


def test_line_starting_with_punctuation():
    with pytest.raises(AsmSyntaxError) as e:
        assemble(".unit pe 0 0\n.segment repeat=1\n    , nop\n")
    assert e.value.line == 3 and e.value.col == 5
