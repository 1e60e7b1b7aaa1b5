"""Context-sensitive control-flow graph built by cloning blocks per entry context."""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import networkx as nx

from .asm import (FREE_MEMORY_POINTER, FUSED_MLOAD_FMP, FUSED_MSTORE_FMP,
                  Instruction, fuse_fmp_accesses)
from .errors import (NO_DEADLINE, CloneBudgetExceeded, Deadline, InvalidStack,
                     UnknownProgramPoint, UnresolvedJump)

MAX_STACK = 1024
DEFAULT_MAX_CLONES = 64

_LABEL = re.compile(r"^(0x[0-9a-fA-F]+)(?:_(\d+))?$")


@dataclass(frozen=True, order=True)
class ProgramPoint:
    """An instruction occurrence: byte offset plus clone index.

    Clone 0 is the first copy of a block; clone k > 0 prints as ``pc_{k-1}``,
    so the three copies of a block at 0x175 read 0x175, 0x175_0, 0x175_1.
    """

    pc: int
    clone: int = 0

    @property
    def label(self) -> str:
        base = f"0x{self.pc:X}"
        return base if self.clone == 0 else f"{base}_{self.clone - 1}"

    @classmethod
    def parse(cls, text: str) -> "ProgramPoint":
        m = _LABEL.match(text.strip())
        if not m:
            raise ValueError(f"bad program point {text!r}")
        clone = 0 if m.group(2) is None else int(m.group(2)) + 1
        return cls(int(m.group(1), 16), clone)

    def __str__(self) -> str:
        return self.label

    __repr__ = __str__


def pp(text: str) -> ProgramPoint:
    return ProgramPoint.parse(text)


@dataclass(frozen=True)
class BasicBlock:
    start: int
    instructions: tuple[Instruction, ...]

    @property
    def last(self) -> Instruction:
        return self.instructions[-1]

    @property
    def end(self) -> int:
        return self.last.next_pc


@dataclass(eq=False)
class CfgNode:
    entry_pc: int
    clone: int
    instructions: list[ProgramPoint]
    entry_height: int
    entry_constants: dict[int, int]
    successors: list["CfgNode"] = field(default_factory=list)
    index: int = 0

    @property
    def key(self) -> tuple[int, int]:
        return (self.entry_pc, self.clone)

    @property
    def label(self) -> str:
        return ProgramPoint(self.entry_pc, self.clone).label

    def __repr__(self) -> str:
        return f"CfgNode({self.label}, h={self.entry_height})"


def build_blocks(dis: Sequence[Instruction]) -> dict[int, BasicBlock]:
    """Split a disassembly into basic blocks keyed by their first pc."""
    blocks: dict[int, BasicBlock] = {}
    current: list[Instruction] = []
    for ins in dis:
        if current and (ins.name == "JUMPDEST" or _ends_block(current[-1])):
            blocks[current[0].pc] = BasicBlock(current[0].pc, tuple(current))
            current = []
        current.append(ins)
    if current:
        blocks[current[0].pc] = BasicBlock(current[0].pc, tuple(current))
    return blocks


def _ends_block(ins: Instruction) -> bool:
    return ins.op.is_terminator or ins.name == "JUMPI"


class Cfg:
    def __init__(self, blocks: dict[int, BasicBlock]):
        self.blocks = blocks
        self.nodes: dict[tuple[int, int], CfgNode] = {}
        self.order: list[CfgNode] = []
        self.entry: Optional[CfgNode] = None
        self.height_map: dict[ProgramPoint, int] = {}
        self._instr: dict[ProgramPoint, Instruction] = {}
        self._node_of: dict[ProgramPoint, tuple[CfgNode, int]] = {}
        self._reach: Optional[list[int]] = None
        self._preds: Optional[dict[CfgNode, list[CfgNode]]] = None

    def __iter__(self) -> Iterator[CfgNode]:
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)

    def program_points(self) -> Iterator[ProgramPoint]:
        for node in self.order:
            yield from node.instructions

    def instruction(self, point: ProgramPoint) -> Instruction:
        """The instruction at `point`, carrying that clone's fusion marker."""
        try:
            return self._instr[point]
        except KeyError:
            raise UnknownProgramPoint(point) from None

    def top(self, point: ProgramPoint) -> int:
        try:
            return self.height_map[point]
        except KeyError:
            raise UnknownProgramPoint(point) from None

    def node_of(self, point: ProgramPoint) -> CfgNode:
        try:
            return self._node_of[point][0]
        except KeyError:
            raise UnknownProgramPoint(point) from None

    def position(self, point: ProgramPoint) -> int:
        return self._node_of[point][1]

    def node(self, label: str) -> CfgNode:
        p = ProgramPoint.parse(label)
        return self.nodes[(p.pc, p.clone)]

    def clones_of(self, pc: int) -> list[CfgNode]:
        return [n for n in self.order if n.entry_pc == pc]

    def points_at(self, pc: int) -> list[ProgramPoint]:
        return [p for p in self.program_points() if p.pc == pc]

    def predecessors(self, node: CfgNode) -> list[CfgNode]:
        if self._preds is None:
            preds: dict[CfgNode, list[CfgNode]] = {n: [] for n in self.order}
            for n in self.order:
                for s in n.successors:
                    preds[s].append(n)
            self._preds = preds
        return self._preds[node]

    @property
    def clone_count(self) -> int:
        return len(self.order)

    def fused_disassembly(self) -> list[Instruction]:
        """Instruction-level view: fused where every reached clone agrees."""
        verdict: dict[int, bool] = {}
        for p, ins in self._instr.items():
            if ins.name in ("MLOAD", "MSTORE"):
                here = ins.fused is not None
                verdict[p.pc] = verdict.get(p.pc, here) and here
        flat = [ins for b in sorted(self.blocks) for ins in self.blocks[b].instructions]
        return fuse_fmp_accesses(flat, verdict)

    def _node_reach(self) -> list[int]:
        if self._reach is not None:
            return self._reach
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.order)))
        for n in self.order:
            for s in n.successors:
                g.add_edge(n.index, s.index)
        cond = nx.condensation(g)
        members = {c: sum(1 << m for m in cond.nodes[c]["members"]) for c in cond}
        reach_scc: dict[int, int] = {}
        for c in reversed(list(nx.topological_sort(cond))):
            bits = 0
            for d in cond.successors(c):
                bits |= members[d] | reach_scc[d]
            mem = cond.nodes[c]["members"]
            if len(mem) > 1 or any(g.has_edge(m, m) for m in mem):
                bits |= members[c]
            reach_scc[c] = bits
        mapping = cond.graph["mapping"]
        self._reach = [reach_scc[mapping[i]] for i in range(len(self.order))]
        return self._reach

    def reach_bits(self, node: CfgNode) -> int:
        """Bitset of node indices reachable from `node` via one or more edges."""
        return self._node_reach()[node.index]

    def reachable(self, p: ProgramPoint, q: ProgramPoint) -> bool:
        np_, ip = self._node_of.get(p, (None, 0))
        nq, iq = self._node_of.get(q, (None, 0))
        if np_ is None:
            raise UnknownProgramPoint(p)
        if nq is None:
            raise UnknownProgramPoint(q)
        if np_ is nq and iq > ip:
            return True
        return bool(self.reach_bits(np_) >> nq.index & 1)

    def to_dot(self) -> str:
        lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
        for n in self.order:
            body = "\\l".join(str(self._instr[p]) for p in n.instructions)
            lines.append(f'  "{n.label}" [label="{n.label} (h={n.entry_height})\\l{body}\\l"];')
        for n in self.order:
            for s in n.successors:
                lines.append(f'  "{n.label}" -> "{s.label}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _context_key(stack: Sequence[Optional[int]], jumpdests: frozenset[int]) -> tuple:
    relevant = tuple((i, v) for i, v in enumerate(stack)
                     if v is not None and (v in jumpdests or v == FREE_MEMORY_POINTER))
    return (len(stack), relevant)


@dataclass
class _BlockRun:
    heights: list[int]
    fused: list[Optional[object]]
    succ_pcs: list[int]
    exit_stack: list[Optional[int]]


def _run_block(block: BasicBlock, stack: list[Optional[int]], jumpdests: frozenset[int],
               next_block: Optional[int]) -> _BlockRun:
    heights: list[int] = []
    fused: list = []
    succ: list[int] = []
    for ins in block.instructions:
        op = ins.op
        h = len(stack)
        heights.append(h)
        if h < op.pops:
            raise InvalidStack(f"stack underflow at {ins.pc:#x} ({op})")
        marker = None
        if ins.name in ("MLOAD", "MSTORE") and stack[-1] == FREE_MEMORY_POINTER:
            marker = FUSED_MLOAD_FMP if ins.name == "MLOAD" else FUSED_MSTORE_FMP
        fused.append(marker)
        if op.is_push:
            stack.append(ins.push_value)
        elif op.is_dup:
            stack.append(stack[-op.index])
        elif op.is_swap:
            i = op.index
            stack[-1], stack[-1 - i] = stack[-1 - i], stack[-1]
        elif ins.name == "JUMP":
            target = stack.pop()
            if target is None:
                raise UnresolvedJump(ins.pc)
            if target in jumpdests:
                succ.append(target)
        elif ins.name == "JUMPI":
            target = stack.pop()
            cond = stack.pop()
            if target is None:
                raise UnresolvedJump(ins.pc)
            if cond is None or cond == 0:
                if next_block is not None:
                    succ.append(next_block)
            if (cond is None or cond != 0) and target in jumpdests:
                if target not in succ:
                    succ.append(target)
        else:
            if op.pops:
                del stack[-op.pops:]
            stack.extend([None] * op.pushes)
        if len(stack) > MAX_STACK:
            raise InvalidStack(f"stack overflow at {ins.pc:#x}")
    last = block.last
    if not last.op.is_terminator and last.name != "JUMPI" and next_block is not None:
        succ.append(next_block)
    return _BlockRun(heights, fused, succ, stack)


def build_context_sensitive_cfg(blocks: dict[int, BasicBlock], *,
                                max_clones: int = DEFAULT_MAX_CLONES,
                                deadline: Deadline = NO_DEADLINE) -> Cfg:
    cfg = Cfg(blocks)
    if not blocks:
        return cfg
    starts = sorted(blocks)
    following = {a: b for a, b in zip(starts, starts[1:])}
    jumpdests = frozenset(pc for pc, b in blocks.items()
                          if b.instructions[0].name == "JUMPDEST")
    contexts: dict[tuple[int, tuple], CfgNode] = {}
    clone_counter: dict[int, int] = {}

    def get_node(pc: int, stack: Sequence[Optional[int]]) -> CfgNode:
        key = _context_key(stack, jumpdests)
        found = contexts.get((pc, key))
        if found is not None:
            return found
        clone = clone_counter.get(pc, 0)
        if clone >= max_clones:
            raise CloneBudgetExceeded(pc, max_clones)
        clone_counter[pc] = clone + 1
        node = CfgNode(pc, clone, [ProgramPoint(i.pc, clone) for i in blocks[pc].instructions],
                       key[0], dict(key[1]), index=len(cfg.order))
        contexts[(pc, key)] = node
        cfg.nodes[node.key] = node
        cfg.order.append(node)
        queue.append(node)
        return node

    queue: deque[CfgNode] = deque()
    cfg.entry = get_node(starts[0], ())
    while queue:
        deadline.check()
        node = queue.popleft()
        block = blocks[node.entry_pc]
        stack: list[Optional[int]] = [None] * node.entry_height
        for i, v in node.entry_constants.items():
            stack[i] = v
        run = _run_block(block, stack, jumpdests, following.get(block.start))
        for k, (ins, p) in enumerate(zip(block.instructions, node.instructions)):
            cfg.height_map[p] = run.heights[k]
            cfg._instr[p] = replace(ins, fused=run.fused[k])
            cfg._node_of[p] = (node, k)
        for target in run.succ_pcs:
            node.successors.append(get_node(target, run.exit_stack))
    return cfg


def build_cfg(dis: Sequence[Instruction], **kw) -> Cfg:
    return build_context_sensitive_cfg(build_blocks(dis), **kw)
