"""Abstract memory slots: which free-pointer loads can yield the same baseref."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .asm import FUSED_MLOAD_FMP, FUSED_MSTORE_FMP, Instruction
from .cfg import Cfg, ProgramPoint
from .fixpoint import DomainContract, Solution, solve

SlotState = frozenset  # frozenset[frozenset[ProgramPoint]]

NO_TRANSIENT: SlotState = frozenset({frozenset()})
UNREACHED: SlotState = frozenset()

# instructions that finalize any transient slot (besides the fused MSTORE 0x40)
_CLOSING = frozenset({"RETURN", "REVERT", "STOP", "SELFDESTRUCT", "INVALID"})


def closes_slots(ins: Instruction) -> bool:
    return ins.fused is FUSED_MSTORE_FMP or ins.name in _CLOSING


def slot_transfer(ins: Instruction, state: SlotState, point: ProgramPoint) -> SlotState:
    if ins.fused is FUSED_MLOAD_FMP:
        return frozenset(s | {point} for s in state)
    if closes_slots(ins):
        return NO_TRANSIENT if state else state
    return state


def _union(a: SlotState, b: SlotState) -> SlotState:
    return a | b


def _subset(a: SlotState, b: SlotState) -> bool:
    return a <= b


SLOT_DOMAIN = DomainContract(bottom=UNREACHED, join=_union, leq=_subset,
                             transfer=slot_transfer, entry=NO_TRANSIENT)


def run_slot_analysis(cfg: Cfg, **kw) -> Solution:
    return solve(cfg, SLOT_DOMAIN, **kw)


@dataclass(frozen=True)
class AbstractSlot:
    id: int
    points: frozenset[ProgramPoint]

    @property
    def labels(self) -> list[str]:
        return [p.label for p in sorted(self.points)]

    def __str__(self) -> str:
        return f"s{self.id}{{{', '.join(self.labels)}}}"


@dataclass
class AbstractSlotTable:
    slots: list[AbstractSlot] = field(default_factory=list)
    index: dict[ProgramPoint, frozenset[int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def by_id(self, slot_id: int) -> AbstractSlot:
        return self.slots[slot_id - 1]

    def id_of(self, points: Iterable[ProgramPoint]) -> int:
        target = frozenset(points)
        for s in self.slots:
            if s.points == target:
                return s.id
        raise KeyError(target)

    def point_sets(self) -> set[frozenset[ProgramPoint]]:
        return {s.points for s in self.slots}

    @classmethod
    def from_sets(cls, sets: Iterable[Iterable[ProgramPoint]]) -> "AbstractSlotTable":
        unique = {frozenset(s) for s in sets if s}
        ordered = sorted(unique, key=lambda s: tuple(sorted(s)))
        slots = [AbstractSlot(i + 1, pts) for i, pts in enumerate(ordered)]
        index: dict[ProgramPoint, set[int]] = {}
        for s in slots:
            for p in s.points:
                index.setdefault(p, set()).add(s.id)
        return cls(slots, {p: frozenset(ids) for p, ids in index.items()})


def collect_slots(sol: Solution, cfg: Cfg) -> AbstractSlotTable:
    """S_all: transient sets live just before each slot-closing instruction.

    Ids follow the sorted order of each set's members, so the set whose
    smallest point comes first gets id 1.
    """
    found = set()
    for p, state in sol.pre.items():
        if closes_slots(cfg.instruction(p)):
            found.update(state)
    return AbstractSlotTable.from_sets(found)


def get_slots(point: ProgramPoint, table: AbstractSlotTable) -> frozenset[int]:
    return table.index.get(point, frozenset())
