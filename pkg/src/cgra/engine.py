"""
Cycle-stepped execution of the 24 units against a shared L1.

Each cycle runs in two phases. In the read phase every active unit fetches its
operands: a neighbour-port read sees that neighbour's ``out_h`` (E/W ports) or
``out_v`` (N/S ports) as it stood at the end of the previous cycle, so a value
crosses exactly one link per cycle. In the commit phase every unit writes its
result. A MOB has one ``out`` register that both of its ports expose; it is
stored in the ``out_h`` and ``out_v`` slots alike.

L1 has a fixed one-cycle latency: a LOAD lands in the MOB's ``out`` at the end
of the issuing cycle. All eight MOBs may access L1 in the same cycle.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .fabric import NUM_UNITS, UNITS, NodeId, neighbor
from .isa import (
    PORT_SOURCES,
    ContextImage,
    DstSel,
    InvalidProgram,
    Opcode,
    SrcSel,
    UnitProgram,
    unpack_image,
    validate_program,
)

DEFAULT_L1_SIZE = 131072
DEFAULT_MAX_CYCLES = 10_000_000

_WORD = struct.Struct("<i")

# operand kinds used by the compiled program
_SRC_OUT_H, _SRC_OUT_V, _SRC_ACC, _SRC_ZERO, _SRC_IMM, _SRC_RF = range(6)

def wrap32(x: int) -> int:
    return ((x + 0x80000000) & 0xFFFFFFFF) - 0x80000000


def pack4(lanes) -> int:
    """Pack four int8 lanes (lane 0 in the low byte) into a signed 32-bit word."""
    return _WORD.unpack(struct.pack("<4b", *lanes))[0]


def unpack4(word: int) -> tuple[int, int, int, int]:
    return struct.unpack("<4b", _WORD.pack(wrap32(word)))


def mac4(a: int, b: int) -> int:
    s = 0
    for sh in (0, 8, 16, 24):
        x = (a >> sh) & 0xFF
        y = (b >> sh) & 0xFF
        s += (x - 256 if x > 127 else x) * (y - 256 if y > 127 else y)
    return s


class Trace(Enum):
    OFF = "off"
    COUNTERS = "counters"
    FULL = "full"


class EngineError(RuntimeError):
    pass


class OutOfRange(EngineError):
    def __init__(self, offset: int, length: int, l1_size: int):
        super().__init__(f"L1 range [{offset}, {offset + length}) outside 0..{l1_size}")
        self.offset, self.length, self.l1_size = offset, length, l1_size


class SimulationFault(EngineError):
    """A halting access error raised from inside the cycle loop."""

    def __init__(self, what: str, unit: NodeId, cycle: int, address: int):
        super().__init__(f"{what}: unit {unit} cycle {cycle} address 0x{address:x}")
        self.unit, self.cycle, self.address = unit, cycle, address


class MisalignedAccess(SimulationFault):
    def __init__(self, unit, cycle, address):
        super().__init__("misaligned access", unit, cycle, address)


class OutOfRangeAccess(SimulationFault):
    def __init__(self, unit, cycle, address):
        super().__init__("out-of-range access", unit, cycle, address)


class CycleBudgetExceeded(EngineError):
    def __init__(self, max_cycles: int, result: RunResult):
        super().__init__(f"kernel still running after {max_cycles} cycles")
        self.max_cycles = max_cycles
        self.result = result


class MachineBusy(EngineError):
    pass


@dataclass
class CounterSet:
    """Event counts of one or more runs.

    ``alu_ops`` counts MOV/ADD/SUB/MUL/SRA/CLAMP8/LDI/DRN; ``rf_writes`` counts
    writes to RF0..RF7; ``link_reads`` counts operands taken from a neighbour port.
    """

    cycles: int = 0
    busy: list[int] = field(default_factory=lambda: [0] * NUM_UNITS)
    idle: list[int] = field(default_factory=lambda: [0] * NUM_UNITS)
    mac4_ops: int = 0
    alu_ops: int = 0
    rf_writes: int = 0
    link_reads: int = 0
    loads: int = 0
    stores: int = 0
    l1_read_bytes: int = 0
    l1_write_bytes: int = 0

    def __add__(self, other: CounterSet) -> CounterSet:
        return CounterSet(
            cycles=self.cycles + other.cycles,
            busy=[a + b for a, b in zip(self.busy, other.busy)],
            idle=[a + b for a, b in zip(self.idle, other.idle)],
            mac4_ops=self.mac4_ops + other.mac4_ops,
            alu_ops=self.alu_ops + other.alu_ops,
            rf_writes=self.rf_writes + other.rf_writes,
            link_reads=self.link_reads + other.link_reads,
            loads=self.loads + other.loads,
            stores=self.stores + other.stores,
            l1_read_bytes=self.l1_read_bytes + other.l1_read_bytes,
            l1_write_bytes=self.l1_write_bytes + other.l1_write_bytes,
        )

    def utilization(self, unit: NodeId) -> float:
        return self.busy[unit.index] / self.cycles if self.cycles else 0.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "cycles", "mac4_ops", "alu_ops", "rf_writes", "link_reads", "loads", "stores",
            "l1_read_bytes", "l1_write_bytes")}
        d["busy"] = {str(u): self.busy[u.index] for u in UNITS}
        d["idle"] = {str(u): self.idle[u.index] for u in UNITS}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CounterSet:
        scalars = {k: int(d[k]) for k in (
            "cycles", "mac4_ops", "alu_ops", "rf_writes", "link_reads", "loads", "stores",
            "l1_read_bytes", "l1_write_bytes")}
        return cls(busy=[int(d["busy"][str(u)]) for u in UNITS],
                   idle=[int(d["idle"][str(u)]) for u in UNITS], **scalars)


@dataclass
class RunResult:
    cycles: int
    completed: bool
    counters: CounterSet
    state: dict
    trace: Optional[list[dict]] = None

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.trace or ())


class _Unit:
    __slots__ = ("node", "segs", "seg", "rep", "ctx", "outer", "done", "k")

    def __init__(self, node, segs):
        self.node = node
        self.segs = segs
        self.seg = self.rep = self.ctx = self.outer = self.k = 0
        self.done = not segs


_DST_NAMES = {DstSel.NULL: "null", DstSel.OUT_H: "out_h", DstSel.OUT_V: "out_v",
              DstSel.ACC: "acc", **{DstSel(8 + i): f"rf{i}" for i in range(8)}}


def _compile_source(node: NodeId, src: SrcSel) -> tuple[int, int]:
    if src in PORT_SOURCES:
        port = PORT_SOURCES[src]
        kind = _SRC_OUT_V if src in (SrcSel.N, SrcSel.S) else _SRC_OUT_H
        return kind, neighbor(node, port).index
    if src is SrcSel.ACC:
        return _SRC_ACC, 0
    if src is SrcSel.ZERO:
        return _SRC_ZERO, 0
    if src is SrcSel.IMM:
        return _SRC_IMM, 0
    return _SRC_RF, int(src) - 8


def _compile(program: UnitProgram):
    segs = []
    for seg in program.segments:
        ctx = []
        for ins in seg.context:
            srcs = [_compile_source(program.unit, s) for s in ins.sources]
            srcs += [(_SRC_ZERO, 0)] * (2 - len(srcs))
            ctx.append((int(ins.opcode), int(ins.dst), srcs[0][0], srcs[0][1],
                        srcs[1][0], srcs[1][1], ins.imm))
        segs.append((ctx, seg.repeat, seg.agu))
    return segs


class Machine:
    """One CGRA instance: 24 units, their registers, and the shared L1."""

    def __init__(self, l1_size: int = DEFAULT_L1_SIZE):
        if l1_size <= 0 or l1_size % 4:
            raise ValueError(f"l1_size must be a positive multiple of 4, got {l1_size}")
        self.l1_size = l1_size
        self.l1 = bytearray(l1_size)
        self.image: Optional[ContextImage] = None
        self._reset([UnitProgram(u) for u in UNITS], 1)

    # -- host side -------------------------------------------------------------

    def write_l1(self, offset: int, data: bytes) -> None:
        self._check_range(offset, len(data))
        self.l1[offset:offset + len(data)] = data

    def read_l1(self, offset: int, length: int) -> bytes:
        self._check_range(offset, length)
        return bytes(self.l1[offset:offset + length])

    def _check_range(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.l1_size:
            raise OutOfRange(offset, length, self.l1_size)

    def load_image(self, image: Union[bytes, bytearray, ContextImage]) -> None:
        """Install a kernel (the memory-controller step). L1 contents are kept."""
        if self.cycle and not self.done:
            raise MachineBusy(f"cannot load a new image at cycle {self.cycle} of a running kernel")
        if isinstance(image, ContextImage):
            programs, reps = list(image.programs), image.outer_reps
        else:
            programs, reps = unpack_image(bytes(image))
        violations = [v for p in programs for v in validate_program(p)]
        if violations:
            raise InvalidProgram(violations)
        self.image = ContextImage(tuple(programs), reps)
        self._reset(programs, reps)

    def _reset(self, programs, outer_reps: int) -> None:
        self.outer_reps = outer_reps
        self.units = [_Unit(p.unit, _compile(p)) for p in programs]
        self.out_h = [0] * NUM_UNITS
        self.out_v = [0] * NUM_UNITS
        self.acc = [0] * NUM_UNITS
        self.rf = [[0] * 8 for _ in range(NUM_UNITS)]
        self.cycle = 0
        self.counters = CounterSet()

    @property
    def done(self) -> bool:
        return all(u.done for u in self.units)

    def state(self) -> dict:
        return {
            str(u): {"out_h": self.out_h[u.index], "out_v": self.out_v[u.index],
                     "acc": self.acc[u.index], "rf": list(self.rf[u.index])}
            if u.is_pe else {"out": self.out_h[u.index]}
            for u in UNITS
        }

    # -- execution -----------------------------------------------------------------

    def step(self) -> list[dict]:
        """Advance one cycle; returns the event records of the non-idle units."""
        records: list[dict] = []
        self._step(records)
        return records

    def run(self, max_cycles: int = DEFAULT_MAX_CYCLES, trace: Trace = Trace.OFF) -> RunResult:
        trace = Trace(trace)
        records: Optional[list[dict]] = [] if trace is Trace.FULL else None
        while not self.done:
            if self.cycle >= max_cycles:
                raise CycleBudgetExceeded(max_cycles, self._result(False, records))
            self._step(records)
        return self._result(True, records)

    def _result(self, completed: bool, records) -> RunResult:
        return RunResult(self.cycle, completed, self.counters, self.state(), records)

    def _fault(self, cls, unit: _Unit, addr: int):
        raise cls(unit.node, self.cycle, addr)

    def _address(self, unit: _Unit, agu, k: int, outer: int) -> int:
        addr = agu.address(k, outer)
        if addr % 4:
            self._fault(MisalignedAccess, unit, addr)
        if addr < 0 or addr + 4 > self.l1_size:
            self._fault(OutOfRangeAccess, unit, addr)
        return addr

    def _step(self, records: Optional[list]) -> None:
        out_h, out_v, acc, rf = self.out_h, self.out_v, self.acc, self.rf
        c = self.counters
        cycle = self.cycle
        busy, idle = c.busy, c.idle
        reps = self.outer_reps
        links = macs = alus = loads = 0
        writes = []
        stores = []

        # read phase; program positions advance here too since they feed no operand
        for i, u in enumerate(self.units):
            if u.done:
                idle[i] += 1
                continue
            ctx, repeat, agu = u.segs[u.seg]
            op, dst, ak, ai, bk, bi, imm = ctx[u.ctx]
            k, outer = u.k, u.outer
            if op == 10 or op == 11:
                u.k = k + 1
            u.ctx += 1
            if u.ctx == len(ctx):
                u.ctx = 0
                u.rep += 1
                if u.rep == repeat:
                    u.rep = 0
                    u.k = 0
                    u.seg += 1
                    if u.seg == len(u.segs):
                        u.seg = 0
                        u.outer += 1
                        if u.outer == reps:
                            u.done = True
            if op == 0:
                idle[i] += 1
                continue
            busy[i] += 1

            if ak <= _SRC_OUT_V:
                a = out_h[ai] if ak == _SRC_OUT_H else out_v[ai]
                links += 1
            elif ak == _SRC_ZERO:
                a = 0
            elif ak == _SRC_ACC:
                a = acc[i]
            elif ak == _SRC_IMM:
                a = imm
            else:
                a = rf[i][ai]
            if bk <= _SRC_OUT_V:
                b = out_h[bi] if bk == _SRC_OUT_H else out_v[bi]
                links += 1
            elif bk == _SRC_ZERO:
                b = 0
            elif bk == _SRC_ACC:
                b = acc[i]
            elif bk == _SRC_IMM:
                b = imm
            else:
                b = rf[i][bi]

            addr = None
            if op == 5:  # MAC4
                macs += 1
                s = 0
                for sh in (0, 8, 16, 24):
                    x = (a >> sh) & 0xFF
                    y = (b >> sh) & 0xFF
                    s += (x - 256 if x > 127 else x) * (y - 256 if y > 127 else y)
                value = ((acc[i] + s + 0x80000000) & 0xFFFFFFFF) - 0x80000000
                writes.append((i, 3, value))
                writes.append((i, 1, a))
                writes.append((i, 2, b))
            elif op == 10:  # LOAD
                addr = self._address(u, agu, k, outer)
                loads += 1
                value = _WORD.unpack_from(self.l1, addr)[0]
                writes.append((i, 1, value))
            elif op == 11:  # STORE
                addr = self._address(u, agu, k, outer)
                value = a
                stores.append((addr, a))
            elif op == 6:  # DRN
                alus += 1
                value = acc[i]
                writes.append((i, 2, value))
                writes.append((i, 3, 0))
            else:
                alus += 1
                if op == 1:
                    value = a
                elif op == 2:
                    value = wrap32(a + b)
                elif op == 3:
                    value = wrap32(a - b)
                elif op == 4:
                    value = wrap32(a * b)
                elif op == 7:
                    value = a >> imm
                elif op == 8:
                    value = 127 if a > 127 else (-128 if a < -128 else a)
                else:  # LDI
                    value = imm
                if dst:
                    writes.append((i, dst, value))
            if records is not None:
                records.append(self._record(cycle, u.node, op, dst, value, addr))

        # commit phase
        for i, dst, value in writes:
            if dst == 3:
                acc[i] = value
            elif dst <= 2:
                if i >= 16:
                    out_h[i] = out_v[i] = value
                elif dst == 1:
                    out_h[i] = value
                else:
                    out_v[i] = value
            else:
                rf[i][dst - 8] = value
                c.rf_writes += 1
        for addr, value in stores:
            _WORD.pack_into(self.l1, addr, value)

        c.link_reads += links
        c.mac4_ops += macs
        c.alu_ops += alus
        c.loads += loads
        c.stores += len(stores)
        c.l1_read_bytes = 4 * c.loads
        c.l1_write_bytes = 4 * c.stores
        self.cycle += 1
        c.cycles = self.cycle

    @staticmethod
    def _record(cycle: int, node: NodeId, op: int, dst: int, value: int, addr) -> dict:
        if op == Opcode.STORE:
            dname = "mem"
        elif op == Opcode.LOAD or (not node.is_pe and dst in (DstSel.OUT_H, DstSel.OUT_V)):
            dname = "out"
        elif op == Opcode.DRN:
            dname = "out_v"
        else:
            dname = _DST_NAMES[DstSel(dst)]
        rec = {"cycle": cycle, "unit": str(node), "opcode": Opcode(op).name,
               "dst": dname, "value": value}
        if addr is not None:
            rec["addr"] = addr
        return rec
