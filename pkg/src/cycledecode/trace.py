"""Forward-pass accounting for the layers-per-token cost model.

Each generation pass logs one entry per (non-empty) layer range it
traverses. One entry costs ``len(range)`` layer invocations regardless of
how many token positions ride in the pass: the memory-bound premise that
makes the cost model exactly checkable on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError
from .model import LayerPartition

RANGE_NAMES = ("encoding", "thinking", "decoding")


@dataclass(frozen=True)
class TraceEntry:
    pass_index: int
    range_name: str
    positions: tuple[int, ...]


@dataclass
class InvocationTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def add(self, pass_index: int, range_name: str, positions) -> None:
        if range_name not in RANGE_NAMES:
            raise ContractError(f"unknown layer range {range_name!r}")
        positions = tuple(int(p) for p in positions)
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ContractError("trace positions must be strictly increasing")
        if self.entries and pass_index < self.entries[-1].pass_index:
            raise ContractError("trace pass indices must be monotone")
        self.entries.append(TraceEntry(pass_index, range_name, positions))

    def pass_count(self) -> int:
        return len({e.pass_index for e in self.entries})

    def range_pass_count(self, *range_names: str) -> int:
        """Number of distinct passes that traverse any of the given ranges."""
        return len({e.pass_index for e in self.entries if e.range_name in range_names})

    def layer_invocations(self, partition: LayerPartition) -> int:
        ranges = partition.named_ranges()
        return sum(len(ranges[e.range_name]) for e in self.entries)

    def summary(self) -> list[dict]:
        return [
            {"pass": e.pass_index, "range": e.range_name, "positions": list(e.positions)}
            for e in self.entries
        ]
