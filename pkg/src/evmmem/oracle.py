"""Concrete EVM interpreter and the executable soundness checks built on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .asm import (BY_NAME, FREE_MEMORY_POINTER, Instruction, disassemble,
                  mem_read_pos, mem_write_pos)
from .cfg import Cfg, ProgramPoint
from .fixpoint import Solution
from .fixtures import CallStub, keccak256
from .slots import AbstractSlotTable

WORD = 1 << 256
MASK = WORD - 1
SIGN = 1 << 255
MAX_STACK = 1024
MAX_MEMORY = 1 << 22
DEFAULT_STEPS = 100_000

ADDRESS = 0xA11CE00000000000000000000000000000000A11
CALLER = 0xCA11E00000000000000000000000000000000CA1


class OracleError(Exception):
    pass


class OracleStackUnderflow(OracleError):
    pass


class OracleStackOverflow(OracleError):
    pass


class UnsupportedOpcode(OracleError):
    pass


class AssumptionViolation(OracleError):
    """The free memory pointer moved backwards."""


@dataclass(frozen=True)
class Step:
    index: int
    point: ProgramPoint
    op: str
    stack_before: tuple[int, ...]
    stack_after: tuple[int, ...]
    reads: tuple[tuple[int, int], ...] = ()
    writes: tuple[tuple[int, int], ...] = ()
    freeptr: Optional[int] = None  # None once halted

    @property
    def pc(self) -> int:
        return self.point.pc

    @property
    def height(self) -> int:
        return len(self.stack_before)

    @property
    def loads_freeptr(self) -> bool:
        return self.op == "MLOAD" and self.stack_before[-1] == FREE_MEMORY_POINTER


@dataclass
class ConcreteState:
    pc: int
    stack: list[int]
    memory: bytearray
    step: int


@dataclass
class Trace:
    steps: list[Step] = field(default_factory=list)
    halt: str = ""
    returndata: bytes = b""
    budget_exhausted: bool = False
    label_errors: list[str] = field(default_factory=list)
    final: Optional[ConcreteState] = None

    def __len__(self) -> int:
        return len(self.steps)


def _signed(x: int) -> int:
    return x - WORD if x & SIGN else x


class _Memory:
    def __init__(self, initial: bytes = b""):
        self.data = bytearray(initial)

    def _grow(self, end: int) -> None:
        if end > MAX_MEMORY:
            raise _Halt("OUT_OF_GAS")
        if end > len(self.data):
            size = (end + 31) // 32 * 32
            self.data.extend(b"\0" * (size - len(self.data)))

    def read(self, start: int, size: int) -> bytes:
        if size == 0:
            return b""
        self._grow(start + size)
        return bytes(self.data[start:start + size])

    def write(self, start: int, blob: bytes) -> None:
        if not blob:
            return
        self._grow(start + len(blob))
        self.data[start:start + len(blob)] = blob

    def word(self, start: int) -> int:
        return int.from_bytes(self.read(start, 32), "big")

    def peek_word(self, start: int) -> int:
        chunk = self.data[start:start + 32]
        return int.from_bytes(bytes(chunk).ljust(32, b"\0"), "big")


class _Halt(Exception):
    def __init__(self, reason: str, data: bytes = b""):
        self.reason = reason
        self.data = data


class _Labeler:
    """Follow the cloned CFG alongside execution to name each step."""

    def __init__(self, cfg: Optional[Cfg], trace: Trace):
        self.cfg = cfg
        self.trace = trace
        self.node = cfg.entry if cfg is not None else None
        self.k = 0
        self.lost = cfg is None

    def point(self, pc: int) -> ProgramPoint:
        if self.lost:
            return ProgramPoint(pc, 0 if self.cfg is None else -1)
        if self.k >= len(self.node.instructions):
            nxt = [s for s in self.node.successors if s.entry_pc == pc]
            if len(nxt) != 1:
                self._lose(f"no CFG edge {self.node.label} -> {pc:#x}")
                return ProgramPoint(pc, -1)
            self.node, self.k = nxt[0], 0
        p = self.node.instructions[self.k]
        if p.pc != pc:
            self._lose(f"expected {p} but executed {pc:#x}")
            return ProgramPoint(pc, -1)
        self.k += 1
        return p

    def jumped(self) -> None:
        # a taken jump leaves the block even when instructions remain
        if not self.lost:
            self.k = len(self.node.instructions)

    def _lose(self, msg: str) -> None:
        self.lost = True
        self.trace.label_errors.append(msg)


def execute(code: bytes, calldata: bytes = b"", external_model: Optional[Mapping] = None, *,
            max_steps: int = DEFAULT_STEPS, cfg: Optional[Cfg] = None,
            storage: Optional[Mapping[int, int]] = None, initial_freeptr: Optional[int] = None,
            strict: bool = True) -> Trace:
    """Run `code` once and record every step.

    external_model maps callee address (or "*") to a CallStub; unknown callees
    fail with empty return data.  With `cfg` each step is labelled with its
    cloned program point; otherwise clone 0 is used.
    """
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    stubs = dict(external_model or {})
    dis = {ins.pc: ins for ins in disassemble(code)}
    jumpdests = {pc for pc, ins in dis.items() if ins.name == "JUMPDEST"}
    store = dict(storage or {})
    mem = _Memory()
    if initial_freeptr is not None:
        mem.write(FREE_MEMORY_POINTER, initial_freeptr.to_bytes(32, "big"))
    stack: list[int] = []
    trace = Trace()
    labels = _Labeler(cfg, trace)
    last_freeptr = mem.peek_word(FREE_MEMORY_POINTER)
    returndata = b""
    pc = 0

    def pop() -> int:
        return stack.pop()

    while True:
        if len(trace.steps) >= max_steps:
            trace.budget_exhausted = True
            trace.halt = "BUDGET"
            break
        ins: Optional[Instruction] = dis.get(pc)
        if ins is None:
            # running off the end is an implicit STOP
            trace.halt = "STOP"
            break
        point = labels.point(pc)
        before = tuple(stack)
        op = ins.op
        name = op.mnemonic
        if len(stack) < op.pops:
            raise OracleStackUnderflow(f"{name} at {pc:#x}")
        reads: list[tuple[int, int]] = []
        writes: list[tuple[int, int]] = []
        next_pc = ins.next_pc
        halted: Optional[_Halt] = None
        try:
            if op.is_push:
                stack.append(ins.push_value)
            elif op.is_dup:
                stack.append(stack[-op.index])
            elif op.is_swap:
                i = op.index
                stack[-1], stack[-1 - i] = stack[-1 - i], stack[-1]
            elif name == "JUMP":
                dest = pop()
                if dest not in jumpdests:
                    raise _Halt("INVALID_JUMP")
                next_pc = dest
                labels.jumped()
            elif name == "JUMPI":
                dest, cond = pop(), pop()
                if cond:
                    if dest not in jumpdests:
                        raise _Halt("INVALID_JUMP")
                    next_pc = dest
                    labels.jumped()
            elif name == "MLOAD":
                a = pop()
                reads.append((a, 32))
                stack.append(mem.word(a))
            elif name == "MSTORE":
                a, v = pop(), pop()
                writes.append((a, 32))
                mem.write(a, v.to_bytes(32, "big"))
            elif name == "MSTORE8":
                a, v = pop(), pop()
                writes.append((a, 1))
                mem.write(a, bytes([v & 0xFF]))
            elif name in _SIMPLE:
                args = [pop() for _ in range(op.pops)]
                stack.append(_SIMPLE[name](*args) & MASK)
            elif name == "KECCAK256":
                a, n = pop(), pop()
                reads.append((a, n))
                stack.append(int.from_bytes(keccak256(mem.read(a, n)), "big"))
            elif name == "CALLDATALOAD":
                a = pop()
                chunk = calldata[a:a + 32] if a < len(calldata) else b""
                stack.append(int.from_bytes(chunk.ljust(32, b"\0"), "big"))
            elif name == "CALLDATASIZE":
                stack.append(len(calldata))
            elif name in ("CALLDATACOPY", "CODECOPY", "RETURNDATACOPY"):
                dest, src, n = pop(), pop(), pop()
                source = {"CALLDATACOPY": calldata, "CODECOPY": code,
                          "RETURNDATACOPY": returndata}[name]
                if name == "RETURNDATACOPY" and src + n > len(returndata):
                    raise _Halt("INVALID")
                blob = source[src:src + n] if src < len(source) else b""
                writes.append((dest, n))
                mem.write(dest, blob.ljust(n, b"\0"))
            elif name == "EXTCODECOPY":
                _addr, dest, _src, n = pop(), pop(), pop(), pop()
                writes.append((dest, n))
                mem.write(dest, b"\0" * n)
            elif name == "CODESIZE":
                stack.append(len(code))
            elif name == "RETURNDATASIZE":
                stack.append(len(returndata))
            elif name in _ENV:
                for _ in range(op.pops):
                    pop()
                stack.append(_ENV[name])
            elif name == "SLOAD":
                stack.append(store.get(pop(), 0))
            elif name == "SSTORE":
                k, v = pop(), pop()
                store[k] = v
            elif name == "PC":
                stack.append(pc)
            elif name == "MSIZE":
                stack.append(len(mem.data))
            elif name == "GAS":
                stack.append(10_000_000)
            elif name in ("JUMPDEST",):
                pass
            elif name == "POP":
                pop()
            elif name.startswith("LOG"):
                a, n = pop(), pop()
                for _ in range(op.pops - 2):
                    pop()
                reads.append((a, n))
                mem.read(a, n)
            elif name in ("CREATE", "CREATE2"):
                _value, a, n = pop(), pop(), pop()
                if name == "CREATE2":
                    pop()
                reads.append((a, n))
                mem.read(a, n)
                stack.append(0)
            elif name in ("CALL", "CALLCODE", "DELEGATECALL", "STATICCALL"):
                _gas, callee = pop(), pop()
                if name in ("CALL", "CALLCODE"):
                    pop()
                a_off, a_len, r_off, r_len = pop(), pop(), pop(), pop()
                reads.append((a_off, a_len))
                mem.read(a_off, a_len)
                stub = stubs.get(callee & ((1 << 160) - 1), stubs.get("*"))
                if stub is None:
                    stub = CallStub(b"", False)
                returndata = bytes(stub.returndata)
                out = returndata[:r_len]
                writes.append((r_off, len(out)))
                mem.write(r_off, out)
                stack.append(1 if stub.success else 0)
            elif name == "STOP":
                raise _Halt("STOP")
            elif name in ("RETURN", "REVERT"):
                a, n = pop(), pop()
                reads.append((a, n))
                raise _Halt(name, mem.read(a, n))
            elif name == "SELFDESTRUCT":
                pop()
                raise _Halt("SELFDESTRUCT")
            elif name == "INVALID":
                raise _Halt("INVALID")
            else:
                raise UnsupportedOpcode(f"{name} at {pc:#x}")
        except _Halt as h:
            halted = h
        if len(stack) > MAX_STACK:
            raise OracleStackOverflow(f"at {pc:#x}")

        freeptr = None
        if halted is None:
            freeptr = mem.peek_word(FREE_MEMORY_POINTER)
            if strict and freeptr < last_freeptr:
                raise AssumptionViolation(
                    f"free pointer decreased {last_freeptr:#x} -> {freeptr:#x} at {pc:#x}")
            last_freeptr = freeptr
        trace.steps.append(Step(len(trace.steps), point, name, before, tuple(stack),
                                tuple(r for r in reads if r[1]), tuple(w for w in writes if w[1]),
                                freeptr))
        if halted is not None:
            trace.halt = halted.reason
            trace.returndata = halted.data
            break
        pc = next_pc
    trace.final = ConcreteState(pc, list(stack), mem.data, len(trace.steps))
    return trace


def _div(a, b):
    return a // b if b else 0


def _sdiv(a, b):
    a, b = _signed(a), _signed(b)
    if b == 0:
        return 0
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _smod(a, b):
    a, b = _signed(a), _signed(b)
    if b == 0:
        return 0
    r = abs(a) % abs(b)
    return -r if a < 0 else r


def _signextend(b, x):
    if b >= 31:
        return x
    bit = b * 8 + 7
    mask = (1 << (bit + 1)) - 1
    return x | (MASK ^ mask) if x >> bit & 1 else x & mask


def _byte(i, x):
    return (x >> (8 * (31 - i))) & 0xFF if i < 32 else 0


def _sar(shift, x):
    return _signed(x) >> min(shift, 256)


_SIMPLE = {
    "ADD": lambda a, b: a + b,
    "MUL": lambda a, b: a * b,
    "SUB": lambda a, b: a - b,
    "DIV": _div,
    "SDIV": _sdiv,
    "MOD": lambda a, b: a % b if b else 0,
    "SMOD": _smod,
    "ADDMOD": lambda a, b, n: (a + b) % n if n else 0,
    "MULMOD": lambda a, b, n: (a * b) % n if n else 0,
    "EXP": lambda a, b: pow(a, b, WORD),
    "SIGNEXTEND": _signextend,
    "LT": lambda a, b: int(a < b),
    "GT": lambda a, b: int(a > b),
    "SLT": lambda a, b: int(_signed(a) < _signed(b)),
    "SGT": lambda a, b: int(_signed(a) > _signed(b)),
    "EQ": lambda a, b: int(a == b),
    "ISZERO": lambda a: int(a == 0),
    "AND": lambda a, b: a & b,
    "OR": lambda a, b: a | b,
    "XOR": lambda a, b: a ^ b,
    "NOT": lambda a: a ^ MASK,
    "BYTE": _byte,
    "SHL": lambda s, x: x << s if s < 256 else 0,
    "SHR": lambda s, x: x >> s if s < 256 else 0,
    "SAR": _sar,
}

_ENV = {
    "ADDRESS": ADDRESS, "BALANCE": 0, "ORIGIN": CALLER, "CALLER": CALLER,
    "CALLVALUE": 0, "GASPRICE": 1, "EXTCODESIZE": 1, "EXTCODEHASH": 0,
    "BLOCKHASH": 0, "COINBASE": 0, "TIMESTAMP": 1_700_000_000, "NUMBER": 18_000_000,
    "DIFFICULTY": 0, "GASLIMIT": 30_000_000, "CHAINID": 1, "SELFBALANCE": 0, "BASEFEE": 1,
}


@dataclass(frozen=True)
class ConcreteSlot:
    baseref: int
    loading_points: tuple[ProgramPoint, ...]


def concrete_slots(trace: Trace) -> list[ConcreteSlot]:
    """One slot per distinct value produced by a load of the free pointer."""
    groups: dict[int, list[ProgramPoint]] = {}
    for s in trace.steps:
        if s.loads_freeptr:
            groups.setdefault(s.stack_after[-1], []).append(s.point)
    return [ConcreteSlot(b, tuple(pts)) for b, pts in sorted(groups.items())]


def abstraction_of(slot: ConcreteSlot) -> frozenset[ProgramPoint]:
    return frozenset(slot.loading_points)


class _Regions:
    """Concrete slot i owns addresses [base_i, base_{i+1}).

    Only slots whose base was already loaded count, so a scratch access past
    the current free pointer is not charged to a slot allocated later.
    """

    def __init__(self, trace: Trace):
        first: dict[int, int] = {}
        for s in trace.steps:
            if s.loads_freeptr:
                first.setdefault(s.stack_after[-1], s.index)
        self.slots = concrete_slots(trace)
        self.first = [first[c.baseref] for c in self.slots]

    def find(self, addr: int, step: int) -> Optional[ConcreteSlot]:
        best = None
        for c, t in zip(self.slots, self.first):
            if t <= step and c.baseref <= addr:
                best = c
        return best


@dataclass
class CheckReport:
    name: str
    checked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def merge(self, other: "CheckReport") -> None:
        self.checked += other.checked
        self.violations.extend(other.violations)

    def __str__(self) -> str:
        return f"{self.name}: {self.checked} checked, {len(self.violations)} violations"


def _covering(table: AbstractSlotTable, alpha: frozenset) -> set[int]:
    return {s.id for s in table.slots if alpha <= s.points}


def check_slot_soundness(trace: Trace, table: AbstractSlotTable) -> CheckReport:
    rep = CheckReport("slots")
    for c in concrete_slots(trace):
        rep.checked += 1
        alpha = abstraction_of(c)
        if not _covering(table, alpha):
            rep.violations.append(
                f"concrete slot {c.baseref:#x} {{{', '.join(sorted(p.label for p in alpha))}}} not covered")
    return rep


def check_access_soundness(trace: Trace, sol: Solution, table: AbstractSlotTable) -> CheckReport:
    rep = CheckReport("accesses")
    regions = _Regions(trace)
    for s in trace.steps:
        if s.loads_freeptr or not (s.reads or s.writes):
            continue
        op_read = mem_read_pos(BY_NAME[s.op])
        op_write = mem_write_pos(BY_NAME[s.op])
        accesses = [(r, op_read) for r in s.reads] + [(w, op_write) for w in s.writes]
        for (addr, _size), depth in accesses:
            c = regions.find(addr, s.index)
            if c is None or depth is None:
                continue
            rep.checked += 1
            pos = s.height - 1 - depth
            state = sol.pre.get(s.point)
            held = state.at(pos) if state is not None else frozenset()
            if not held & _covering(table, abstraction_of(c)):
                rep.violations.append(
                    f"{s.point} {s.op} touches slot {c.baseref:#x} via position {pos}, "
                    f"abstract {sorted(held)}")
    return rep


def check_needless_soundness(traces: Iterable[Trace], findings, table: AbstractSlotTable) -> CheckReport:
    rep = CheckReport("needless")
    by_point: dict[ProgramPoint, list[int]] = {}
    for f in findings:
        by_point.setdefault(f.point, []).append(f.slot)
    for trace in traces:
        regions = _Regions(trace)
        steps = trace.steps
        for k, s in enumerate(steps):
            slots = by_point.get(s.point)
            if not slots or not s.writes:
                continue
            for addr, size in s.writes:
                c = regions.find(addr, s.index)
                if c is None:
                    continue
                alpha = abstraction_of(c)
                for slot_id in slots:
                    if not alpha <= table.by_id(slot_id).points:
                        continue
                    rep.checked += 1
                    hit = _later_read(steps, k, addr, addr + size)
                    if hit is not None:
                        rep.violations.append(
                            f"{s.point}:s{slot_id} wrote [{addr:#x},{addr + size:#x}) "
                            f"read later by {hit.point} {hit.op}")
    return rep


def _later_read(steps: list[Step], k: int, lo: int, hi: int) -> Optional[Step]:
    for s in steps[k + 1:]:
        for a, n in s.reads:
            if a < hi and lo < a + n:
                return s
    return None


def check_cfg_soundness(trace: Trace, cfg: Cfg) -> CheckReport:
    """Every step lies on a CFG path, has the predicted stack height, and a
    fused step really sees 0x40 as its address operand."""
    rep = CheckReport("cfg")
    rep.violations.extend(trace.label_errors)
    for s in trace.steps:
        if s.point.clone < 0:
            break
        rep.checked += 1
        if cfg.height_map.get(s.point) != s.height:
            rep.violations.append(f"{s.point}: height {s.height}, cfg says {cfg.height_map.get(s.point)}")
        elif cfg.instruction(s.point).fused is not None and s.stack_before[-1] != FREE_MEMORY_POINTER:
            rep.violations.append(f"{s.point}: fused but address operand is {s.stack_before[-1]:#x}")
    return rep
