"""
Counter-based energy and utilization reports.

Energies are in abstract units; the shipped coefficients are placeholders, not
measurements of any silicon. The switched baseline is deliberately coarse: it
charges one router traversal for every operand a unit takes from a neighbour.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .engine import CounterSet
from .fabric import UNITS


class NegativeCoefficient(ValueError):
    pass


@dataclass(frozen=True)
class EnergyModel:
    e_alu: float = 1.0
    e_mac4: float = 4.0
    e_rf_write: float = 0.5
    e_link_hop: float = 0.5
    e_load: float = 10.0
    e_store: float = 10.0
    e_idle: float = 0.05
    e_router_hop: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError(f"{f.name} must be a number, got {v!r}")
            if not math.isfinite(v) or v < 0:
                raise NegativeCoefficient(f"{f.name} = {v} must be finite and >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> EnergyModel:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown energy coefficients: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> EnergyModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def scaled(self, factor: float) -> EnergyModel:
        return EnergyModel(**{k: v * factor for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Report:
    cycles: int
    utilization: dict[str, float]
    traffic_bytes: int
    l1_read_bytes: int
    l1_write_bytes: int
    energy_switchless: float
    energy_switched_baseline: float

    @property
    def ratio(self) -> float:
        """Baseline over switchless energy; 1 when nothing was spent."""
        if self.energy_switchless == 0:
            return 1.0
        return self.energy_switched_baseline / self.energy_switchless

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        d["energy_units"] = "abstract (model-based, not silicon power)"
        d["baseline_model"] = "one router traversal per neighbour operand read"
        return d


def switchless_energy(c: CounterSet, m: EnergyModel) -> float:
    return (c.alu_ops * m.e_alu
            + c.mac4_ops * m.e_mac4
            + c.rf_writes * m.e_rf_write
            + c.link_reads * m.e_link_hop
            + c.loads * m.e_load
            + c.stores * m.e_store
            + sum(c.idle) * m.e_idle)


def build_report(counters: CounterSet, model: EnergyModel | None = None) -> Report:
    model = model or EnergyModel()
    e = switchless_energy(counters, model)
    return Report(
        cycles=counters.cycles,
        utilization={str(u): counters.utilization(u) for u in UNITS},
        traffic_bytes=counters.l1_read_bytes + counters.l1_write_bytes,
        l1_read_bytes=counters.l1_read_bytes,
        l1_write_bytes=counters.l1_write_bytes,
        energy_switchless=e,
        energy_switched_baseline=e + counters.link_reads * model.e_router_hop,
    )


def load_counters(path) -> CounterSet:
    data = json.loads(Path(path).read_text())
    return CounterSet.from_dict(data.get("counters", data))
