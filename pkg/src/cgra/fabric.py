"""
Switchless mesh-torus topology of the 4x4 PE grid and its 8 memory blocks.

Every row is a 5-node ring  MobW(r) - PE(r,0) - ... - PE(r,3) - (wrap) MobW(r)
and every column a 5-node ring  MobN(c) - PE(0,c) - ... - PE(3,c) - (wrap) MobN(c).
There is no router anywhere: a unit only ever sees the output registers of
its ring neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

ROWS = 4
COLS = 4


class Kind(Enum):
    PE = "pe"
    MOBW = "mobw"
    MOBN = "mobn"


class Port(IntEnum):
    N = 0
    S = 1
    E = 2
    W = 3

    @property
    def opposite(self) -> Port:
        return _OPPOSITE[self]


_OPPOSITE = {Port.N: Port.S, Port.S: Port.N, Port.E: Port.W, Port.W: Port.E}


class NoSuchPort(ValueError):
    def __init__(self, node: NodeId, port: Port):
        super().__init__(f"{node} has no {port.name} port")
        self.node = node
        self.port = port


@dataclass(frozen=True, order=True)
class NodeId:
    """A unit of the array. For MobW only ``row`` is meaningful, for MobN only ``col``."""

    kind: Kind
    row: int = 0
    col: int = 0

    def __post_init__(self):
        if self.kind is Kind.PE:
            ok = 0 <= self.row < ROWS and 0 <= self.col < COLS
        elif self.kind is Kind.MOBW:
            ok = 0 <= self.row < ROWS and self.col == 0
        else:
            ok = 0 <= self.col < COLS and self.row == 0
        if not ok:
            raise ValueError(f"invalid node coordinates {self.kind.value}({self.row},{self.col})")

    @property
    def index(self) -> int:
        """Position in canonical unit order (PE row-major, then MobW, then MobN)."""
        if self.kind is Kind.PE:
            return self.row * COLS + self.col
        if self.kind is Kind.MOBW:
            return ROWS * COLS + self.row
        return ROWS * COLS + ROWS + self.col

    @property
    def is_pe(self) -> bool:
        return self.kind is Kind.PE

    @property
    def ports(self) -> tuple[Port, ...]:
        if self.kind is Kind.PE:
            return (Port.N, Port.S, Port.E, Port.W)
        if self.kind is Kind.MOBW:
            return (Port.E, Port.W)
        return (Port.N, Port.S)

    def __str__(self) -> str:
        if self.kind is Kind.PE:
            return f"pe({self.row},{self.col})"
        if self.kind is Kind.MOBW:
            return f"mobw({self.row})"
        return f"mobn({self.col})"


def PE(row: int, col: int) -> NodeId:
    return NodeId(Kind.PE, row, col)


def MobW(row: int) -> NodeId:
    return NodeId(Kind.MOBW, row, 0)


def MobN(col: int) -> NodeId:
    return NodeId(Kind.MOBN, 0, col)


UNITS: tuple[NodeId, ...] = (
    tuple(PE(r, c) for r in range(ROWS) for c in range(COLS))
    + tuple(MobW(r) for r in range(ROWS))
    + tuple(MobN(c) for c in range(COLS))
)
NUM_UNITS = len(UNITS)


def unit_from_index(index: int) -> NodeId:
    if not 0 <= index < NUM_UNITS:
        raise ValueError(f"unit index {index} out of range 0..{NUM_UNITS - 1}")
    return UNITS[index]


def _ring_row(r: int) -> list[NodeId]:
    return [MobW(r)] + [PE(r, c) for c in range(COLS)]


def _ring_col(c: int) -> list[NodeId]:
    return [MobN(c)] + [PE(r, c) for r in range(ROWS)]


def neighbor(node: NodeId, port: Port) -> NodeId:
    """Ring neighbour of ``node`` through ``port``; E/S step forward along the ring."""
    port = Port(port)
    if port not in node.ports:
        raise NoSuchPort(node, port)
    if port in (Port.E, Port.W):
        ring = _ring_row(node.row)
        step = 1 if port is Port.E else -1
    else:
        ring = _ring_col(node.col)
        step = 1 if port is Port.S else -1
    return ring[(ring.index(node) + step) % len(ring)]


def all_links() -> list[tuple[NodeId, Port, NodeId]]:
    """Every directed link ``(from, from_port, to)``; 8 rings x 5 edges x 2 directions."""
    return [(u, p, neighbor(u, p)) for u in UNITS for p in u.ports]
