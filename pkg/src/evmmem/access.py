"""Where slot baserefs may live: on stack positions and inside other slots."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from .asm import FUSED_MLOAD_FMP, Instruction
from .cfg import Cfg, ProgramPoint
from .errors import StackUnderflow
from .fixpoint import DomainContract, Solution, solve
from .slots import AbstractSlotTable, get_slots

EMPTY: frozenset[int] = frozenset()

# result keeps a slot identity: baseref plus an offset, or a size difference
_POINTER_ARITH = frozenset({"ADD", "SUB"})


@dataclass(frozen=True)
class AccessState:
    """π with stack positions (0 = stack bottom) and slot ids as separate keys.

    Empty sets are never stored, so equality is structural.
    """

    stack: Mapping[int, frozenset[int]] = field(default_factory=dict)
    memory: Mapping[int, frozenset[int]] = field(default_factory=dict)

    def at(self, pos: int) -> frozenset[int]:
        return self.stack.get(pos, EMPTY)

    def slot(self, slot_id: int) -> frozenset[int]:
        return self.memory.get(slot_id, EMPTY)

    def __hash__(self):
        return hash((frozenset(self.stack.items()), frozenset(self.memory.items())))

    def describe(self) -> str:
        parts = [f"{k}->{{{','.join(f's{i}' for i in sorted(v))}}}" for k, v in sorted(self.stack.items())]
        parts += [f"s{k}->{{{','.join(f's{i}' for i in sorted(v))}}}" for k, v in sorted(self.memory.items())]
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def of(cls, stack=None, memory=None) -> "AccessState":
        def clean(d):
            return {k: frozenset(v) for k, v in (d or {}).items() if v}
        return cls(clean(stack), clean(memory))


EMPTY_STATE = AccessState()


def _join_maps(a: Mapping[int, frozenset], b: Mapping[int, frozenset]) -> dict:
    if not b:
        return a
    if not a:
        return b
    out = dict(a)
    for k, v in b.items():
        old = out.get(k)
        out[k] = v if old is None else old | v
    return out


def join_access(a: AccessState, b: AccessState) -> AccessState:
    if a is b:
        return a
    return AccessState(_join_maps(a.stack, b.stack), _join_maps(a.memory, b.memory))


def _leq_maps(a: Mapping[int, frozenset], b: Mapping[int, frozenset]) -> bool:
    for k, v in a.items():
        other = b.get(k)
        if other is None or not v <= other:
            return False
    return True


def leq_access(a: AccessState, b: AccessState) -> bool:
    return a is b or (_leq_maps(a.stack, b.stack) and _leq_maps(a.memory, b.memory))


def access_transfer(ins: Instruction, state: AccessState, point: ProgramPoint,
                    height: int, table: AbstractSlotTable) -> AccessState:
    """Apply one instruction; `height` is the stack size before it."""
    t = height - 1
    op = ins.op
    if height < op.pops:
        raise StackUnderflow(f"{ins.name} at {point} needs {op.pops} operands, has {height}")
    stack = dict(state.stack)
    memory = state.memory

    if ins.fused is FUSED_MLOAD_FMP:
        ids = get_slots(point, table)
        _put(stack, t, ids)
    elif ins.name == "MLOAD":
        pointed = EMPTY
        for s in state.at(t):
            pointed = pointed | state.slot(s)
        _put(stack, t, pointed)
    elif ins.name == "MSTORE" and ins.fused is None:
        value = state.at(t - 1)
        targets = state.at(t)
        if value and targets:
            memory = dict(memory)
            for s in targets:
                memory[s] = memory.get(s, EMPTY) | value
        stack.pop(t, None)
        stack.pop(t - 1, None)
    elif op.is_swap:
        i = op.index
        a, b = stack.pop(t, None), stack.pop(t - i, None)
        if a:
            stack[t - i] = a
        if b:
            stack[t] = b
    elif op.is_dup:
        _put(stack, t + 1, state.at(t - op.index + 1))
    else:
        first = height - op.pops
        merged = EMPTY
        for x in range(first, height):
            v = stack.pop(x, None)
            if v and ins.name in _POINTER_ARITH:
                merged = merged | v
        if merged and op.pushes:
            stack[first] = merged
    return AccessState(stack, memory)


def _put(stack: dict, pos: int, value: frozenset) -> None:
    if value:
        stack[pos] = value
    else:
        stack.pop(pos, None)


def access_domain(cfg: Cfg, table: AbstractSlotTable) -> DomainContract:
    heights = cfg.height_map

    def transfer(ins: Instruction, state: AccessState, point: ProgramPoint) -> AccessState:
        return access_transfer(ins, state, point, heights[point], table)

    return DomainContract(bottom=EMPTY_STATE, join=join_access, leq=leq_access,
                          transfer=transfer)


def run_access_analysis(cfg: Cfg, table: AbstractSlotTable, **kw) -> Solution:
    return solve(cfg, access_domain(cfg, table), **kw)
