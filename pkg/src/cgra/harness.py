"""
Reference GEMM, end-to-end verification of mapped jobs, and the attention job.

``gemm_ref`` is a plain triple loop over Python integers and shares no code
with the mapper or the engine, which is what makes it usable as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import DEFAULT_L1_SIZE, DEFAULT_MAX_CYCLES, CounterSet, Machine, Trace
from .mapper import GemmJob, GemmShape, emit_gemm_job, plan_gemm


class ShapeMismatch(ValueError):
    pass


def _check_matrix(x, dtype, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {x.shape}")
    info = np.iinfo(dtype)
    if x.size and (x.min() < info.min or x.max() > info.max):
        raise ValueError(f"{name} has values outside {np.dtype(dtype).name}")
    return x.astype(dtype)


def as_i8(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert to an int8 matrix (the MatrixI8 type)."""
    return _check_matrix(x, np.int8, name)


def gemm_ref(a, b) -> np.ndarray:
    """c[i][j] = sum_k a[i][k] * b[k][j], evaluated element by element."""
    a = as_i8(a, "A")
    b = as_i8(b, "B")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeMismatch(f"A is {m}x{k} but B is {k2}x{n}")
    al = a.tolist()
    bl = b.tolist()
    c = [[0] * n for _ in range(m)]
    for i in range(m):
        row = al[i]
        for j in range(n):
            s = 0
            for kk in range(k):
                s += row[kk] * bl[kk][j]
            c[i][j] = s
    return np.array(c, dtype=np.int32).reshape(m, n)


@dataclass
class VerificationReport:
    shape: tuple[int, int, int]
    match: bool
    first_mismatch: Optional[tuple[int, int]]
    measured_cycles: int
    predicted_cycles: int
    counters: CounterSet
    launch_cycles: list[int] = field(default_factory=list)
    result: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cycles_match(self) -> bool:
        return self.measured_cycles == self.predicted_cycles

    @property
    def ok(self) -> bool:
        return self.match and self.cycles_match

    def to_dict(self) -> dict:
        return {
            "shape": dict(zip("mnk", self.shape)),
            "match": self.match,
            "first_mismatch": list(self.first_mismatch) if self.first_mismatch else None,
            "measured_cycles": self.measured_cycles,
            "predicted_cycles": self.predicted_cycles,
            "cycles_match": self.cycles_match,
            "launch_cycles": self.launch_cycles,
            "counters": self.counters.to_dict(),
        }


def execute_job(job: GemmJob, machine: Optional[Machine] = None,
                max_cycles: int = DEFAULT_MAX_CYCLES, trace: Trace = Trace.OFF):
    """Host sequence: fill L1, launch every kernel in order, read C back.

    Returns ``(c_stripped, counters, launch_cycles, traces)``.
    """
    plan = job.plan
    machine = machine or Machine(plan.l1_size)
    for _, offset, data in job.regions:
        machine.write_l1(offset, data)
    total = CounterSet()
    launch_cycles = []
    traces = []
    for image in job.images:
        machine.load_image(image)
        res = machine.run(max_cycles, trace)
        total = total + res.counters
        launch_cycles.append(res.cycles)
        if res.trace is not None:
            traces.append(res.trace)
    raw = machine.read_l1(plan.c_base, plan.c_bytes)
    c = np.frombuffer(raw, dtype="<i4").reshape(plan.m_pad, plan.n_pad)
    s = plan.shape
    return c[:s.m, :s.n].astype(np.int32), total, launch_cycles, traces


def compare(got: np.ndarray, want: np.ndarray) -> Optional[tuple[int, int]]:
    if got.shape != want.shape:
        return (0, 0)
    diff = np.argwhere(got != want)
    return tuple(int(x) for x in diff[0]) if len(diff) else None


def run_and_verify(job: GemmJob, max_cycles: int = DEFAULT_MAX_CYCLES) -> VerificationReport:
    c, counters, launch_cycles, _ = execute_job(job, max_cycles=max_cycles)
    want = gemm_ref(job.a, job.b)
    bad = compare(c, want)
    s = job.plan.shape
    return VerificationReport(
        shape=(s.m, s.n, s.k),
        match=bad is None,
        first_mismatch=bad,
        measured_cycles=sum(launch_cycles),
        predicted_cycles=job.plan.predicted_cycles,
        counters=counters,
        launch_cycles=launch_cycles,
        result=c,
    )


def fabric_gemm(a, b, b_transposed: bool = False, l1_size: int = DEFAULT_L1_SIZE):
    """Map, run and verify ``a @ b`` (or ``a @ b.T`` when ``b_transposed``)."""
    a = as_i8(a, "A")
    b = as_i8(b, "B")
    m, k = a.shape
    n = b.shape[0] if b_transposed else b.shape[1]
    plan = plan_gemm(GemmShape(m, n, k), l1_size)
    job = emit_gemm_job(plan, a.tobytes(), b.tobytes(), b_transposed=b_transposed)
    return run_and_verify(job)


# -- attention ------------------------------------------------------------------


@dataclass
class AttentionSpec:
    """Per-head int8 Q, K, V (S x d each) plus the dequantization scale of those inputs.

    Softmax probabilities are requantized to int8 with a symmetric per-row scale
    ``max(row) / 127``; ``1/sqrt(d)`` and the softmax run on the host in float.
    """

    q: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    input_scale: float = 1.0 / 16

    @property
    def num_heads(self) -> int:
        return len(self.q)

    @property
    def seq_len(self) -> int:
        return self.q[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.q[0].shape[1]

    def __post_init__(self):
        if not (len(self.q) == len(self.k) == len(self.v)) or not self.q:
            raise ShapeMismatch("Q, K and V need the same, nonzero number of heads")
        self.q = [as_i8(x, "Q") for x in self.q]
        self.k = [as_i8(x, "K") for x in self.k]
        self.v = [as_i8(x, "V") for x in self.v]
        shape = self.q[0].shape
        for x in self.q + self.k + self.v:
            if x.shape != shape:
                raise ShapeMismatch(f"every head matrix must be {shape}, got {x.shape}")

    @classmethod
    def random(cls, seq_len: int, head_dim: int, num_heads: int, seed: int = 0,
               input_scale: float = 1.0 / 16) -> AttentionSpec:
        rng = np.random.default_rng(seed)

        def draw():
            return [rng.integers(-128, 128, (seq_len, head_dim), dtype=np.int8)
                    for _ in range(num_heads)]

        return cls(draw(), draw(), draw(), input_scale)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def requantize_rows(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-row int8 quantization; returns (int8 values, per-row scale)."""
    peak = np.abs(p).max(axis=1, keepdims=True)
    scale = np.where(peak > 0, peak / 127.0, 1.0)
    q = np.clip(np.rint(p / scale), -128, 127).astype(np.int8)
    return q, scale[:, 0]


@dataclass
class HeadReport:
    scores: VerificationReport
    output: VerificationReport
    scores_q: np.ndarray = field(repr=False)
    output_float: np.ndarray = field(repr=False)
    mse: float = 0.0

    def to_dict(self) -> dict:
        return {"scores_gemm": self.scores.to_dict(), "output_gemm": self.output.to_dict(),
                "mse": self.mse}


@dataclass
class AttentionReport:
    seq_len: int
    head_dim: int
    num_heads: int
    heads: list[HeadReport]

    @property
    def match(self) -> bool:
        return all(h.scores.match and h.output.match for h in self.heads)

    @property
    def cycles_match(self) -> bool:
        return all(h.scores.cycles_match and h.output.cycles_match for h in self.heads)

    @property
    def total_cycles(self) -> int:
        return sum(h.scores.measured_cycles + h.output.measured_cycles for h in self.heads)

    @property
    def mse(self) -> float:
        return float(np.mean([h.mse for h in self.heads]))

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len, "head_dim": self.head_dim, "num_heads": self.num_heads,
            "match": self.match, "cycles_match": self.cycles_match,
            "total_cycles": self.total_cycles,
            "mse_vs_float": self.mse, "mse_gated": False,
            "heads": [h.to_dict() for h in self.heads],
        }


def attention_job(spec: AttentionSpec) -> AttentionReport:
    d = spec.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)
    s2 = spec.input_scale * spec.input_scale
    heads = []
    for q, k, v in zip(spec.q, spec.k, spec.v):
        # K enters untransposed: the mapper stores B^T, so K itself is that operand
        scores = fabric_gemm(q, k, b_transposed=True)
        logits = scores.result.astype(np.float64) * s2 * inv_sqrt_d
        probs = softmax_rows(logits)
        probs_q, row_scale = requantize_rows(probs)
        out = fabric_gemm(probs_q, v)
        out_float = out.result.astype(np.float64) * row_scale[:, None] * spec.input_scale

        qf, kf, vf = (x.astype(np.float64) * spec.input_scale for x in (q, k, v))
        ref = softmax_rows(qf @ kf.T * inv_sqrt_d) @ vf
        mse = float(np.mean((out_float - ref) ** 2))
        heads.append(HeadReport(scores, out, probs_q, out_float, mse))
    return AttentionReport(spec.seq_len, d, spec.num_heads, heads)
