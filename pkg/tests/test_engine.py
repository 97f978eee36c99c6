import struct

import pytest

from cgra.engine import (
    CycleBudgetExceeded,
    Machine,
    MachineBusy,
    MisalignedAccess,
    OutOfRange,
    OutOfRangeAccess,
    Trace,
    mac4,
    pack4,
    unpack4,
)
from cgra.fabric import UNITS, MobN, MobW, PE
from cgra.isa import AguConfig, DstSel, Instruction, InvalidProgram, Opcode, SrcSel, encode_instruction
from helpers import image, seg

NOP = Instruction(Opcode.NOP)
LOAD = Instruction(Opcode.LOAD)


def ldi(dst, v):
    return Instruction(Opcode.LDI, dst, imm=v)


def alu(op, dst, a, b=SrcSel.N, imm=0):
    return Instruction(op, dst, a, b, imm)


def run(img, l1=b"", trace=Trace.FULL, **kw):
    m = Machine()
    m.write_l1(0, l1)
    m.load_image(img)
    return m, m.run(trace=trace, **kw)


def test_pack_helpers():
    assert unpack4(pack4([1, 2, 3, -128])) == (1, 2, 3, -128)
    assert pack4([1, 2, 3, 4]) == 0x04030201


def test_mac4_lanes():
    assert mac4(pack4([1, 2, 3, 4]), pack4([4, 3, 2, 1])) == 1 * 4 + 2 * 3 + 3 * 2 + 4 * 1 == 20
    assert mac4(pack4([-128] * 4), pack4([-128] * 4)) == 4 * 128 * 128 == 65536


def _mac_once(a, b):
    img = image({
        PE(0, 0): [seg(NOP), seg(Instruction(Opcode.MAC4, DstSel.ACC, SrcSel.W, SrcSel.N))],
        MobW(0): [seg(LOAD, agu=AguConfig(0, 4, 1, 0))],
        MobN(0): [seg(LOAD, agu=AguConfig(4, 4, 1, 0))],
    })
    return run(img, struct.pack("<4b4b", *a, *b))


@pytest.mark.parametrize("a,b,expected", [
    ([1, 2, 3, 4], [4, 3, 2, 1], 20),
    ([-128] * 4, [-128] * 4, 65536),
])
def test_mac4_in_engine(a, b, expected):
    m, res = _mac_once(a, b)
    st = res.state["pe(0,0)"]
    assert st["acc"] == expected
    # the systolic forward
    assert st["out_h"] == pack4(a) and st["out_v"] == pack4(b)
    assert res.counters.mac4_ops == 1 and res.counters.link_reads == 2


def test_neighbour_read_sees_previous_cycle():
    img = image({
        PE(0, 0): [seg(ldi(DstSel.OUT_H, 5))],
        PE(0, 1): [seg(alu(Opcode.MOV, DstSel.RF0, SrcSel.W), repeat=2)],
    })
    _, res = run(img)
    seen = [r["value"] for r in res.trace if r["unit"] == "pe(0,1)"]
    assert seen == [0, 5]


def test_simultaneous_readers_do_not_conflict():
    img = image({
        PE(0, 0): [seg(ldi(DstSel.OUT_H, 9)), seg(ldi(DstSel.OUT_V, -4))],
        PE(0, 1): [seg(NOP), seg(alu(Opcode.MOV, DstSel.RF0, SrcSel.W))],
        PE(1, 0): [seg(NOP, NOP), seg(alu(Opcode.MOV, DstSel.RF0, SrcSel.N))],
        MobW(0): [seg(NOP), seg(alu(Opcode.MOV, DstSel.OUT_H, SrcSel.E))],
        MobN(0): [seg(NOP, NOP), seg(alu(Opcode.MOV, DstSel.OUT_H, SrcSel.S))],
    })
    _, res = run(img)
    assert res.state["pe(0,1)"]["rf"][0] == 9
    assert res.state["mobw(0)"]["out"] == 9
    assert res.state["pe(1,0)"]["rf"][0] == -4
    assert res.state["mobn(0)"]["out"] == -4


def test_value_needs_one_cycle_per_hop():
    from helpers import kernel_corpus
    from cgra.assembler import assemble

    img = assemble(kernel_corpus()["hop_chain.casm"])
    words = [0x11, 0x22, 0x33, 0x44]
    _, res = run(img, bytes(0x40) + struct.pack("<4i", *words))
    first = {}
    for r in res.trace:
        if r["value"] == 0x11 and r["unit"] not in first:
            first[r["unit"]] = r["cycle"]
    assert first["mobw(1)"] == 0
    for c in range(4):
        # PE(1,c) is c+1 hops away from MobW(1)
        assert first[f"pe(1,{c})"] == c + 1


@pytest.mark.parametrize("value,expected", [(300, 127), (-300, -128), (5, 5)])
def test_clamp8(value, expected):
    img = image({PE(2, 2): [seg(ldi(DstSel.RF0, 100), ldi(DstSel.RF1, value // 100),
                                alu(Opcode.MUL, DstSel.RF2, SrcSel.RF0, SrcSel.RF1),
                                alu(Opcode.ADD, DstSel.RF2, SrcSel.RF2, SrcSel.IMM, value % 100),
                                alu(Opcode.CLAMP8, DstSel.RF3, SrcSel.RF2))]})
    _, res = run(img)
    rf = res.state["pe(2,2)"]["rf"]
    assert rf[2] == value and rf[3] == expected


def test_alu_semantics():
    img = image({PE(3, 3): [seg(
        ldi(DstSel.RF0, -128),
        alu(Opcode.SRA, DstSel.RF1, SrcSel.RF0, imm=3),
        alu(Opcode.SUB, DstSel.RF2, SrcSel.ZERO, SrcSel.RF1),
        alu(Opcode.ADD, DstSel.ACC, SrcSel.RF2, SrcSel.IMM, 7),
        alu(Opcode.MOV, DstSel.OUT_V, SrcSel.ACC),
        alu(Opcode.MUL, DstSel.NULL, SrcSel.ACC, SrcSel.ACC),
    )]})
    _, res = run(img)
    st = res.state["pe(3,3)"]
    assert st["rf"][:3] == [-128, -16, 16]
    assert st["acc"] == 23 and st["out_v"] == 23
    assert res.counters.rf_writes == 3
    assert res.counters.alu_ops == 6


def test_arithmetic_wraps_at_32_bits():
    img = image({
        MobW(0): [seg(LOAD, agu=AguConfig(0, 4, 1, 0))],
        PE(0, 0): [seg(NOP), seg(alu(Opcode.ADD, DstSel.RF0, SrcSel.W, SrcSel.IMM, 1),
                                 alu(Opcode.MUL, DstSel.RF1, SrcSel.RF0, SrcSel.IMM, 2))],
    })
    _, res = run(img, struct.pack("<i", 2**31 - 1))
    assert res.state["pe(0,0)"]["rf"][:2] == [-(2**31), 0]


def test_single_mob_load_stream():
    img = image({MobW(0): [seg(LOAD, repeat=8, agu=AguConfig(0, 4, 8, 0))]})
    _, res = run(img, bytes(range(32)))
    c = res.counters
    assert res.cycles == 8
    assert c.loads == 8 and c.l1_read_bytes == 32
    assert [r["addr"] for r in res.trace] == list(range(0, 32, 4))


def test_agu_wraps_inner_count_and_steps_outer():
    img = image({MobN(1): [seg(LOAD, repeat=3, agu=AguConfig(0x100, 8, 2, 64))]}, outer_reps=2)
    _, res = run(img)
    assert [r["addr"] for r in res.trace] == [0x100, 0x108, 0x100, 0x140, 0x148, 0x140]


def test_store_uses_neighbour_value():
    img = image({
        PE(0, 1): [seg(ldi(DstSel.OUT_V, -7))],
        MobN(1): [seg(NOP), seg(Instruction(Opcode.STORE, src_a=SrcSel.S), agu=AguConfig(64, 0, 1, 0))],
    })
    m, res = run(img)
    assert struct.unpack("<i", m.read_l1(64, 4))[0] == -7
    assert res.counters.stores == 1 and res.counters.l1_write_bytes == 4


def test_empty_image_takes_no_cycles():
    _, res = run(image())
    assert res.cycles == 0 and res.completed
    assert res.trace == []


def test_counter_invariants():
    img = image({
        PE(0, 0): [seg(NOP, ldi(DstSel.RF0, 1), repeat=5)],
        MobW(3): [seg(LOAD, NOP, repeat=2, agu=AguConfig(0, 4, 3, 0))],
    }, outer_reps=2)
    _, res = run(img)
    c = res.counters
    assert c.cycles == res.cycles == 20
    for u in UNITS:
        assert c.busy[u.index] + c.idle[u.index] == c.cycles
    assert c.busy[PE(0, 0).index] == 10
    assert c.busy[MobW(3).index] == 4
    assert c.l1_read_bytes == 4 * c.loads


def test_load_twice_resets_state():
    img = image({PE(0, 0): [seg(ldi(DstSel.ACC, 3))]})
    m = Machine()
    m.load_image(img)
    m.run()
    assert m.acc[0] == 3
    m.load_image(image())
    assert m.acc[0] == 0 and m.cycle == 0 and m.counters.cycles == 0
    assert m.run().cycles == 0


def test_refuses_reload_mid_run():
    m = Machine()
    m.load_image(image({PE(0, 0): [seg(NOP, repeat=3)]}))
    m.step()
    with pytest.raises(MachineBusy):
        m.load_image(image())


def test_rejects_pe_load_before_running():
    img = bytearray(image({PE(0, 0): [seg(NOP)]}))
    # header 16, unit header 4, segment header 16
    img[36:40] = struct.pack("<I", encode_instruction(LOAD))
    m = Machine()
    with pytest.raises(InvalidProgram, match="LOAD illegal on PE"):
        m.load_image(bytes(img))
    assert m.cycle == 0


def test_host_memory_access():
    m = Machine(l1_size=64)
    m.write_l1(60, b"abcd")
    assert m.read_l1(60, 4) == b"abcd"
    with pytest.raises(OutOfRange):
        m.read_l1(62, 4)
    with pytest.raises(OutOfRange):
        m.write_l1(64, b"x")


def test_host_writes_between_launches_are_visible():
    img = image({MobW(0): [seg(LOAD, agu=AguConfig(8, 0, 1, 0))]})
    m = Machine()
    m.load_image(img)
    m.run()
    assert m.out_h[MobW(0).index] == 0
    m.write_l1(8, struct.pack("<i", 77))
    m.load_image(img)
    m.run()
    assert m.out_h[MobW(0).index] == 77


def test_misaligned_access_halts():
    img = image({MobW(2): [seg(NOP), seg(LOAD, agu=AguConfig(2, 4, 1, 0))]})
    with pytest.raises(MisalignedAccess) as e:
        run(img)
    assert (e.value.unit, e.value.cycle, e.value.address) == (MobW(2), 1, 2)


def test_out_of_range_store_halts_without_writing():
    img = image({MobN(0): [seg(Instruction(Opcode.STORE, src_a=SrcSel.ZERO), repeat=2,
                                agu=AguConfig(131068, 4, 2, 0))]})
    m = Machine()
    m.load_image(img)
    with pytest.raises(OutOfRangeAccess) as e:
        m.run()
    assert (e.value.unit, e.value.cycle, e.value.address) == (MobN(0), 1, 131072)
    assert m.cycle == 1


def test_cycle_budget():
    m = Machine()
    m.load_image(image({PE(0, 0): [seg(NOP, repeat=100)]}))
    with pytest.raises(CycleBudgetExceeded) as e:
        m.run(max_cycles=10)
    assert e.value.result.cycles == 10 and not e.value.result.completed
    assert m.run(max_cycles=100).cycles == 100


def test_run_is_deterministic():
    from helpers import kernel_corpus
    from cgra.assembler import assemble

    img = assemble(kernel_corpus()["store_column.casm"])
    _, a = run(img, bytes(range(256)))
    _, b = run(img, bytes(range(256)))
    assert a.trace_jsonl() == b.trace_jsonl()
    assert a.counters == b.counters


def test_trace_levels():
    img = image({PE(0, 0): [seg(ldi(DstSel.RF0, 1), NOP)]})
    _, off = run(img, trace=Trace.OFF)
    _, cnt = run(img, trace=Trace.COUNTERS)
    _, full = run(img, trace=Trace.FULL)
    assert off.trace is None and cnt.trace is None
    assert full.trace == [{"cycle": 0, "unit": "pe(0,0)", "opcode": "LDI", "dst": "rf0", "value": 1}]
    assert off.counters == cnt.counters == full.counters
