"""
Block-wise int8 GEMM mapping onto the 4x4 array.

Dataflow is output stationary. PE(i, j) owns one element of the current 4x4
C tile. MobW(r) streams packed 4-lane words of A row r eastwards, MobN(c)
streams packed words of B column c southwards, and every MAC4 forwards both
operands to its own out registers, so the operands hop one PE per cycle. With
row r delayed r cycles and column c delayed c cycles, the words that belong
together meet in PE(i, j) during cycles i+j+1 .. i+j+K (K = k'/4).

Once the last MAC of a column is done, its four PEs issue DRN together at
cycle j+K+4 and shift the accumulators north with ``mov out_v, s``; MobN(j)
stores one accumulator per cycle, row 0 first, down a C column.

Every unit's program is exactly ``L = K + TAIL_CYCLES`` cycles long, so the
whole array re-runs it once per C tile of a tile row (outer_reps) and a launch
takes ``tiles * L`` cycles with no dynamic slack. Per-unit phases in cycles::

    unit      delay    compute  drain   pad
    PE(i,j)   i+j+1    K        7-2i    4+i-j
    MobW(r)   r        K        0       12-r
    MobN(c)   c        K        9       3-c
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import DEFAULT_L1_SIZE
from .fabric import COLS, ROWS, UNITS, NodeId
from .isa import (
    AguConfig,
    DstSel,
    Instruction,
    Opcode,
    Segment,
    SrcSel,
    UnitProgram,
    pack_image,
)

TAIL_CYCLES = 12  # skew in + drain + store, added to k'/4 per tile
MAX_K = 65536
AGU_STRIDE_MAX = (1 << 15) - 1

NOP = Instruction(Opcode.NOP)
MAC = Instruction(Opcode.MAC4, DstSel.ACC, SrcSel.W, SrcSel.N)
DRAIN = Instruction(Opcode.DRN)
SHIFT_UP = Instruction(Opcode.MOV, DstSel.OUT_V, SrcSel.S)
LOAD = Instruction(Opcode.LOAD)
STORE = Instruction(Opcode.STORE, src_a=SrcSel.S)


class MappingError(ValueError):
    pass


class DoesNotFit(MappingError):
    def __init__(self, needed: int, l1_size: int, why: str = ""):
        super().__init__(f"GEMM needs {needed} bytes of L1, have {l1_size}{why}")
        self.needed = needed
        self.l1_size = l1_size


class KTooLarge(MappingError):
    pass


def _round4(x: int) -> int:
    return -(-x // 4) * 4


def _align16(x: int) -> int:
    return -(-x // 16) * 16


@dataclass(frozen=True)
class GemmShape:
    """A (m x k) times B (k x n) gives C (m x n)."""

    m: int
    n: int
    k: int

    def __post_init__(self):
        for name in ("m", "n", "k"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise MappingError(f"{name} must be a positive integer, got {v!r}")
        if self.k > MAX_K:
            raise KTooLarge(f"k={self.k} exceeds {MAX_K}; the 32-bit accumulator could overflow")


@dataclass(frozen=True)
class Phase:
    delay: int
    compute: int
    drain: int
    pad: int

    @property
    def total(self) -> int:
        return self.delay + self.compute + self.drain + self.pad


@dataclass(frozen=True)
class TilePlan:
    shape: GemmShape
    m_pad: int
    n_pad: int
    k_pad: int
    a_base: int
    b_base: int
    c_base: int
    l1_size: int

    @property
    def k_words(self) -> int:
        return self.k_pad // 4

    @property
    def launches(self) -> int:
        return self.m_pad // ROWS

    @property
    def outer_reps(self) -> int:
        return self.n_pad // COLS

    @property
    def tail_cycles(self) -> int:
        return TAIL_CYCLES

    @property
    def iteration_length(self) -> int:
        return self.k_words + TAIL_CYCLES

    @property
    def predicted_cycles(self) -> int:
        return predicted_cycles(self)

    @property
    def c_bytes(self) -> int:
        return 4 * self.m_pad * self.n_pad

    @property
    def c_row_pitch(self) -> int:
        return 4 * self.n_pad

    def phase(self, unit: NodeId) -> Phase:
        K = self.k_words
        if unit.is_pe:
            i, j = unit.row, unit.col
            return Phase(i + j + 1, K, 7 - 2 * i, 4 + i - j)
        if unit.kind.value == "mobw":
            return Phase(unit.row, K, 0, TAIL_CYCLES - unit.row)
        return Phase(unit.col, K, 9, 3 - unit.col)

    @property
    def phases(self) -> dict[NodeId, Phase]:
        return {u: self.phase(u) for u in UNITS}

    def to_dict(self) -> dict:
        return {
            "shape": {"m": self.shape.m, "n": self.shape.n, "k": self.shape.k},
            "padded": {"m": self.m_pad, "n": self.n_pad, "k": self.k_pad},
            "tiles": {"rows": self.launches, "cols": self.outer_reps},
            "launches": self.launches,
            "outer_reps": self.outer_reps,
            "iteration_length": self.iteration_length,
            "tail_cycles": TAIL_CYCLES,
            "regions": {
                "a": {"offset": self.a_base, "length": self.m_pad * self.k_pad},
                "b": {"offset": self.b_base, "length": self.n_pad * self.k_pad},
                "c": {"offset": self.c_base, "length": self.c_bytes},
            },
            "l1_size": self.l1_size,
            "predicted_cycles": self.predicted_cycles,
        }


def plan_gemm(shape: GemmShape, l1_size: int = DEFAULT_L1_SIZE) -> TilePlan:
    m_pad, n_pad, k_pad = _round4(shape.m), _round4(shape.n), _round4(shape.k)
    if 4 * k_pad > AGU_STRIDE_MAX:
        raise KTooLarge(f"k'={k_pad}: B tile stride {4 * k_pad} does not fit the 16-bit AGU stride")
    if 4 * n_pad > AGU_STRIDE_MAX:
        raise DoesNotFit(4 * n_pad, AGU_STRIDE_MAX, " (C row pitch exceeds the AGU stride range)")
    a_base = 0
    b_base = _align16(a_base + m_pad * k_pad)
    c_base = _align16(b_base + n_pad * k_pad)
    end = c_base + 4 * m_pad * n_pad
    if end > l1_size:
        raise DoesNotFit(end, l1_size)
    return TilePlan(shape, m_pad, n_pad, k_pad, a_base, b_base, c_base, l1_size)


def predicted_cycles(plan: TilePlan) -> int:
    return plan.launches * plan.outer_reps * plan.iteration_length


def _segments(plan: TilePlan, unit: NodeId, tile_row: int) -> list[Segment]:
    K = plan.k_words
    ph = plan.phase(unit)
    segs = []
    if ph.delay:
        segs.append(Segment((NOP,), ph.delay))
    if unit.is_pe:
        wait = ROWS - 1 - unit.row
        segs.append(Segment((MAC,), K))
        segs.append(Segment((NOP,) * wait + (DRAIN,) + (SHIFT_UP,) * wait, 1))
        segs.append(Segment((NOP,), ph.pad))
    elif unit.kind.value == "mobw":
        row = tile_row * ROWS + unit.row
        agu = AguConfig(plan.a_base + row * plan.k_pad, 4, K, 0)
        segs.append(Segment((LOAD,), K, agu))
        segs.append(Segment((NOP,), ph.pad))
    else:
        c = unit.col
        segs.append(Segment((LOAD,), K, AguConfig(plan.b_base + c * plan.k_pad, 4, K, 4 * plan.k_pad)))
        segs.append(Segment((NOP,), 5))
        store = AguConfig(plan.c_base + tile_row * ROWS * plan.c_row_pitch + 4 * c,
                          plan.c_row_pitch, ROWS, 4 * COLS)
        segs.append(Segment((STORE,) * ROWS + (NOP,) * ph.pad, 1, store))
    return segs


def kernel_programs(plan: TilePlan, tile_row: int) -> list[UnitProgram]:
    if not 0 <= tile_row < plan.launches:
        raise MappingError(f"tile row {tile_row} outside 0..{plan.launches - 1}")
    return [UnitProgram(u, tuple(_segments(plan, u, tile_row))) for u in UNITS]


def kernel_image(plan: TilePlan, tile_row: int) -> bytes:
    return pack_image(kernel_programs(plan, tile_row), plan.outer_reps)


@dataclass
class GemmJob:
    """Everything the host needs to run one GEMM: L1 contents, kernels, and where C lands."""

    plan: TilePlan
    a: np.ndarray
    b: np.ndarray
    regions: list[tuple[str, int, bytes]]
    images: list[bytes]

    @property
    def c_offset(self) -> int:
        return self.plan.c_base

    @property
    def c_length(self) -> int:
        return self.plan.c_bytes

    def to_dict(self, image_names=None, region_files=None) -> dict:
        d = self.plan.to_dict()
        d["images"] = list(image_names or [f"launch_{t:03d}.img" for t in range(len(self.images))])
        files = region_files or {}
        d["layout"] = [{"name": name, "offset": off, "length": len(data),
                        **({"file": files[name]} if name in files else {})}
                       for name, off, data in self.regions]
        return d


def _as_int8(data, rows: int, cols: int, what: str) -> np.ndarray:
    if isinstance(data, (bytes, bytearray, memoryview)):
        if len(data) != rows * cols:
            raise MappingError(f"{what}: expected {rows * cols} bytes, got {len(data)}")
        return np.frombuffer(bytes(data), dtype=np.int8).reshape(rows, cols).copy()
    arr = np.asarray(data)
    if arr.shape != (rows, cols):
        raise MappingError(f"{what}: expected shape {(rows, cols)}, got {arr.shape}")
    if arr.dtype != np.int8:
        if arr.size and (arr.min() < -128 or arr.max() > 127):
            raise MappingError(f"{what}: values outside int8")
        arr = arr.astype(np.int8)
    return arr


def emit_gemm_job(plan: TilePlan, a_bytes, b_bytes, b_transposed: bool = False) -> GemmJob:
    """Lay out operands in L1 and generate one kernel image per C tile row.

    ``a_bytes`` is A row-major (m x k). ``b_bytes`` is B row-major (k x n), or
    B transposed (n x k) when ``b_transposed`` is set, which is how K enters a
    Q.K^T product without a host transpose.
    """
    s = plan.shape
    a = _as_int8(a_bytes, s.m, s.k, "A")
    if b_transposed:
        b = _as_int8(b_bytes, s.n, s.k, "B^T").T.copy()
    else:
        b = _as_int8(b_bytes, s.k, s.n, "B")

    a_pad = np.zeros((plan.m_pad, plan.k_pad), np.int8)
    a_pad[:s.m, :s.k] = a
    bt_pad = np.zeros((plan.n_pad, plan.k_pad), np.int8)
    bt_pad[:s.n, :s.k] = b.T
    regions = [("a", plan.a_base, a_pad.tobytes()), ("b", plan.b_base, bt_pad.tobytes())]
    images = [kernel_image(plan, t) for t in range(plan.launches)]
    return GemmJob(plan, a, b, regions, images)


JOB_FILE = "job.json"


def save_job(job: GemmJob, directory) -> Path:
    """Write ``job.json``, one ``.img`` per launch, the L1 layout regions and the raw operands."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = [f"launch_{t:03d}.img" for t in range(len(job.images))]
    for name, img in zip(names, job.images):
        (d / name).write_bytes(img)
    files = {}
    for name, _, data in job.regions:
        files[name] = f"{name}_region.bin"
        (d / files[name]).write_bytes(data)
    (d / "a.bin").write_bytes(job.a.tobytes())
    (d / "b.bin").write_bytes(job.b.tobytes())
    doc = job.to_dict(names, files)
    doc["operands"] = {"a": "a.bin", "b": "b.bin", "b_layout": "row-major k x n"}
    doc["result"] = {"offset": job.c_offset, "length": job.c_length,
                     "dtype": "int32 little-endian, row-major m' x n'"}
    path = d / JOB_FILE
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_job(directory) -> GemmJob:
    d = Path(directory)
    path = d / JOB_FILE
    try:
        doc = json.loads(path.read_text())
        shape = GemmShape(doc["shape"]["m"], doc["shape"]["n"], doc["shape"]["k"])
        plan = plan_gemm(shape, doc["l1_size"])
        regions = [(r["name"], int(r["offset"]), (d / r["file"]).read_bytes())
                   for r in doc["layout"]]
        images = [(d / name).read_bytes() for name in doc["images"]]
        a = _as_int8((d / doc["operands"]["a"]).read_bytes(), shape.m, shape.k, "A")
        b = _as_int8((d / doc["operands"]["b"]).read_bytes(), shape.k, shape.n, "B")
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise MappingError(f"{path}: malformed job descriptor ({exc})") from exc
    if doc.get("predicted_cycles") != plan.predicted_cycles:
        raise MappingError(f"{path}: predicted_cycles {doc.get('predicted_cycles')} "
                           f"disagrees with the plan ({plan.predicted_cycles})")
    return GemmJob(plan, a, b, regions, images)
