"""Cycle-stepped simulator, assembler and GEMM mapper for a 4x4 switchless-torus CGRA."""

__version__ = "0.1.0"
