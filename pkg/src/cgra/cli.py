"""
Host-side command line: assemble, map, run, verify and report.

Exit codes: 0 success, 1 verification mismatch, 2 usage or input error,
3 simulation fault, 4 cycle budget exceeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .assembler import AsmError, assemble, disassemble
from .engine import (
    DEFAULT_L1_SIZE,
    DEFAULT_MAX_CYCLES,
    CycleBudgetExceeded,
    Machine,
    SimulationFault,
    Trace,
)
from .harness import AttentionSpec, attention_job, run_and_verify
from .isa import IsaError
from .mapper import GemmShape, MappingError, emit_gemm_job, load_job, plan_gemm, save_job
from .metrics import EnergyModel, build_report, load_counters

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_FAULT, EXIT_BUDGET = range(5)


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def parse_memspec(text: str) -> tuple[Path, int]:
    """``path@0xOFFSET`` -> (path, offset)."""
    path, at, off = text.rpartition("@")
    if not at or not path:
        raise UsageError(f"--mem {text!r}: expected <path>@<offset>")
    try:
        return Path(path), int(off, 0)
    except ValueError:
        raise UsageError(f"--mem {text!r}: bad offset {off!r}") from None


def parse_dump(text: str) -> tuple[int, int, Path]:
    """``0xOFF:LEN:out.bin`` -> (offset, length, path)."""
    parts = text.split(":", 2)
    if len(parts) != 3 or not parts[2]:
        raise UsageError(f"--dump {text!r}: expected <offset>:<length>:<path>")
    try:
        return int(parts[0], 0), int(parts[1], 0), Path(parts[2])
    except ValueError:
        raise UsageError(f"--dump {text!r}: bad offset or length") from None


def _read(path, mode: str = "rb"):
    path = Path(path)
    if str(path) == "-":
        return sys.stdin.buffer.read() if "b" in mode else sys.stdin.read()
    return path.read_bytes() if "b" in mode else path.read_text()


def _emit(doc: dict, out=None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# -- subcommands ------------------------------------------------------------------


def cmd_asm(args) -> int:
    image = assemble(_read(args.input, "r"))
    Path(args.output).write_bytes(image)
    return EXIT_OK


def cmd_dasm(args) -> int:
    text = disassemble(_read(args.input))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _operand(path, rows, cols, seed_rng, name):
    if path is None:
        return seed_rng.integers(-128, 128, (rows, cols), dtype=np.int8)
    data = _read(path)
    if len(data) != rows * cols:
        raise UsageError(f"{path}: {name} needs {rows * cols} bytes, file has {len(data)}")
    return np.frombuffer(data, dtype=np.int8).reshape(rows, cols)


def cmd_map(args) -> int:
    shape = GemmShape(args.m, args.n, args.k)
    plan = plan_gemm(shape, args.l1_size)
    rng = np.random.default_rng(args.seed)
    a = _operand(args.a, shape.m, shape.k, rng, "A")
    b = _operand(args.b, shape.k, shape.n, rng, "B")
    job = emit_gemm_job(plan, a, b)
    path = save_job(job, args.output)
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    machine = Machine(args.l1_size)
    regions = []
    for spec in args.mem:
        path, offset = parse_memspec(spec)
        data = _read(path)
        end = offset + len(data)
        if offset < 0 or end > args.l1_size:
            raise UsageError(f"--mem {spec}: [{offset}, {end}) does not fit L1 of {args.l1_size} bytes")
        for other, lo, hi in regions:
            if offset < hi and lo < end:
                raise UsageError(f"--mem {spec}: overlaps --mem {other}")
        regions.append((spec, offset, end))
        machine.write_l1(offset, data)
    dumps = [parse_dump(d) for d in args.dump]
    for off, length, _ in dumps:
        if off < 0 or length < 0 or off + length > args.l1_size:
            raise UsageError(f"--dump 0x{off:x}:{length}: outside L1 of {args.l1_size} bytes")
    trace = Trace(args.trace)
    if trace is Trace.FULL and not args.trace_out:
        raise UsageError("--trace full requires --trace-out")

    machine.load_image(_read(args.img))
    try:
        result = machine.run(args.max_cycles, trace)
        status = EXIT_OK
    except CycleBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = exc.result
        status = EXIT_BUDGET

    if args.trace_out and trace is Trace.FULL:
        Path(args.trace_out).write_text(result.trace_jsonl())
    elif args.trace_out and trace is Trace.COUNTERS:
        _emit({"counters": result.counters.to_dict()}, args.trace_out)
    for off, length, path in dumps:
        path.write_bytes(machine.read_l1(off, length))
    doc = {"cycles": result.cycles, "completed": result.completed,
           "counters": result.counters.to_dict()}
    if args.counters_out:
        _emit(doc, args.counters_out)
    if not args.quiet:
        _emit(doc)
    return status


def cmd_verify(args) -> int:
    job = load_job(args.job)
    report = run_and_verify(job, args.max_cycles)
    _emit(report.to_dict(), args.output)
    return EXIT_OK if report.ok else EXIT_MISMATCH


def cmd_attention(args) -> int:
    spec = AttentionSpec.random(args.seq, args.dim, args.heads, seed=args.seed)
    report = attention_job(spec)
    doc = report.to_dict()
    doc["seed"] = args.seed
    _emit(doc, args.output)
    return EXIT_OK if report.match and report.cycles_match else EXIT_MISMATCH


def cmd_report(args) -> int:
    counters = load_counters(args.counters)
    model = EnergyModel.load(args.energy_model) if args.energy_model else EnergyModel()
    doc = build_report(counters, model).to_dict()
    doc["energy_model"] = model.to_dict()
    _emit(doc, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgra", description=__doc__.strip().splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("asm", help="assemble .casm text into a context image")
    s.add_argument("input", nargs="?", default="-", help="source file, '-' for stdin")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_asm)

    s = sub.add_parser("dasm", help="disassemble a context image")
    s.add_argument("input")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_dasm)

    s = sub.add_parser("map", help="map a workload onto the array")
    msub = s.add_subparsers(dest="workload", required=True)
    g = msub.add_parser("gemm", help="int8 GEMM C = A x B")
    g.add_argument("--m", type=_int, required=True)
    g.add_argument("--n", type=_int, required=True)
    g.add_argument("--k", type=_int, required=True)
    g.add_argument("--a", help="A as raw int8, row-major m x k (random if omitted)")
    g.add_argument("--b", help="B as raw int8, row-major k x n (random if omitted)")
    g.add_argument("--seed", type=_int, default=0, help="seed for omitted operands")
    g.add_argument("--l1-size", type=_int, default=DEFAULT_L1_SIZE)
    g.add_argument("-o", "--output", required=True, help="job directory")
    g.set_defaults(func=cmd_map)

    s = sub.add_parser("run", help="load memory and an image, run to completion")
    s.add_argument("--img", required=True)
    s.add_argument("--mem", action="append", default=[], metavar="PATH@OFFSET")
    s.add_argument("--l1-size", type=_int, default=DEFAULT_L1_SIZE)
    s.add_argument("--max-cycles", type=_int, default=DEFAULT_MAX_CYCLES)
    s.add_argument("--trace", choices=[t.value for t in Trace], default="off")
    s.add_argument("--trace-out")
    s.add_argument("--dump", action="append", default=[], metavar="OFFSET:LEN:PATH")
    s.add_argument("--counters-out", help="write the counter JSON here")
    s.add_argument("--quiet", action="store_true", help="no summary on stdout")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("verify", help="run a job directory and check it against the oracle")
    s.add_argument("--job", required=True)
    s.add_argument("--max-cycles", type=_int, default=DEFAULT_MAX_CYCLES)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("attention", help="multi-head attention with both GEMMs on the fabric")
    s.add_argument("--seq", type=_int, required=True)
    s.add_argument("--dim", type=_int, required=True)
    s.add_argument("--heads", type=_int, required=True)
    s.add_argument("--seed", type=_int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_attention)

    s = sub.add_parser("report", help="energy/utilization report from a counters file")
    s.add_argument("--counters", required=True)
    s.add_argument("--energy-model")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except CycleBudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        name = exc.filename if exc.filename is not None else ""
        print(f"error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AsmError, IsaError, MappingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
