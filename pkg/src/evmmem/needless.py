"""Read/write maps over abstract slots and the set of writes nobody reads."""

from __future__ import annotations

from dataclasses import dataclass, field

from .asm import FUSED_MLOAD_FMP, FUSED_MSTORE_FMP, Opcode, mem_read_pos, mem_write_pos
from .access import AccessState
from .cfg import Cfg, ProgramPoint
from .errors import StackUnderflow
from .fixpoint import Solution
from .slots import AbstractSlotTable, get_slots


@dataclass
class AccessMaps:
    reads: dict[ProgramPoint, frozenset[int]] = field(default_factory=dict)
    writes: dict[ProgramPoint, frozenset[int]] = field(default_factory=dict)
    # fused MLOAD 0x40 points; their read only fetches the baseref
    baseref_loads: frozenset[ProgramPoint] = frozenset()
    _read_nodes: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True, order=True)
class Finding:
    point: ProgramPoint
    slot: int
    opcode: Opcode = field(compare=False)
    whole_slot_dead: bool = field(default=False, compare=False)

    def __str__(self) -> str:
        return f"{self.point.label}:s{self.slot} ({self.opcode.mnemonic})"


def compute_rw_maps(cfg: Cfg, sol: Solution, table: AbstractSlotTable) -> AccessMaps:
    maps = AccessMaps()
    loads = set()
    for p in cfg.program_points():
        if p not in sol.pre:
            continue
        ins = cfg.instruction(p)
        state: AccessState = sol.pre[p]
        h = cfg.top(p)
        if ins.fused is FUSED_MLOAD_FMP:
            maps.reads[p] = get_slots(p, table)
            loads.add(p)
            continue
        r = mem_read_pos(ins.op)
        if r is not None:
            maps.reads[p] = state.at(_pos(h, r, p))
        w = mem_write_pos(ins.op)
        if w is not None and ins.fused is not FUSED_MSTORE_FMP:
            maps.writes[p] = state.at(_pos(h, w, p))
    maps.baseref_loads = frozenset(loads)
    return maps


def _pos(height: int, depth: int, p: ProgramPoint) -> int:
    pos = height - 1 - depth
    if pos < 0:
        raise StackUnderflow(f"operand {depth} below stack bottom at {p}")
    return pos


def _reads_by_slot(maps: AccessMaps, cfg: Cfg) -> dict[int, tuple[int, dict]]:
    """Per slot: bitset of nodes reading it, and per node the read positions."""
    if maps._read_nodes:
        return maps._read_nodes
    out: dict[int, tuple[int, dict]] = {}
    for p, ids in maps.reads.items():
        node = cfg.node_of(p)
        k = cfg.position(p)
        for s in ids:
            bits, last = out.get(s, (0, {}))
            last[node.index] = max(last.get(node.index, -1), k)
            out[s] = (bits | 1 << node.index, last)
    maps._read_nodes = out
    return out


def exists_read(pw: ProgramPoint, s: int, maps: AccessMaps, cfg: Cfg) -> bool:
    info = _reads_by_slot(maps, cfg).get(s)
    if info is None:
        return False
    bits, last = info
    node = cfg.node_of(pw)
    if last.get(node.index, -1) > cfg.position(pw):
        return True
    return bool(cfg.reach_bits(node) & bits)


def infer_needless(maps: AccessMaps, cfg: Cfg) -> list[Finding]:
    raw = []
    for p in sorted(maps.writes):
        for s in sorted(maps.writes[p]):
            if not exists_read(p, s, maps, cfg):
                raw.append((p, s))
    flagged = set(raw)
    data_read = set()
    for p, ids in maps.reads.items():
        if p not in maps.baseref_loads:
            data_read |= ids
    all_flagged: dict[int, bool] = {}
    for p, ids in maps.writes.items():
        for s in ids:
            all_flagged[s] = all_flagged.get(s, True) and (p, s) in flagged
    return [Finding(p, s, cfg.instruction(p).op,
                    whole_slot_dead=s not in data_read and all_flagged.get(s, False))
            for p, s in raw]
