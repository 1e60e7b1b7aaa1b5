"""Random programs in the solc allocation idiom, for differential testing.

Every program sets up the free memory pointer, then mixes struct
allocations, field writes and reads, pointer stores and loads, an optional
STATICCALL through a scratch slot, if/else on calldata bits and at most one
counted loop.  Pointers are kept on the stack; a pointer loaded from memory
is only read through or stored, never written through, so no write ever
lands outside a slot it was allocated for.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Optional

from .builder import Asm
from .fixtures import CallStub, word

MAX_INSTRUCTIONS = 60
MAX_VARS = 9
CALL_SELECTOR = 0x12345678
CALL_TARGET = 0xAA


@dataclass(eq=False)
class Var:
    id: int
    words: int = 0        # 0 for non-pointers
    primary: bool = True  # allocated here, safe to write through

    @property
    def is_ptr(self) -> bool:
        return self.words > 0


@dataclass
class GeneratedProgram:
    seed: int
    code: bytes
    calldata: list[bytes]
    stubs: dict
    instructions: int
    has_loop: bool
    end_pc: int           # where the terminator sequence starts
    end_stack: list[Var] = field(default_factory=list)

    def pointer_positions(self) -> list[int]:
        return [i for i, v in enumerate(self.end_stack) if v.is_ptr]


class _Budget(Exception):
    pass


class _Gen:
    def __init__(self, seed: int, limit: int):
        self.rng = random.Random(seed)
        self.a = Asm()
        self.stack: list[Var] = []
        self.ids = itertools.count(1)
        self.limit = limit
        self.labels = itertools.count()
        self.loop_used = False

    # stack helpers
    def dup(self, v: Var) -> None:
        k = len(self.stack) - self.stack.index(v)
        if k > 16:
            raise _Budget()
        self.a.op(f"DUP{k}")

    def ptrs(self, primary_only: bool = False) -> list[Var]:
        return [v for v in self.stack if v.is_ptr and (v.primary or not primary_only)]

    def fresh(self, prefix: str) -> str:
        return f"{prefix}{next(self.labels)}"

    def check(self) -> None:
        if len(self.a) > self.limit:
            raise _Budget()

    # statements
    def alloc(self, words: int = 0) -> Var:
        words = words or self.rng.randint(1, 3)
        a = self.a
        a.push(0x40).op("MLOAD", "DUP1").push(0x20 * words).op("ADD").push(0x40).op("MSTORE")
        v = Var(next(self.ids), words)
        self.stack.append(v)
        if self.rng.random() < 0.6:
            for f in range(words):
                a.push(0).op("DUP2")
                if f:
                    a.push(0x20 * f).op("ADD")
                a.op("MSTORE")
        return v

    def realloc(self) -> None:
        targets = self.ptrs(primary_only=True)
        if not targets:
            return self.write()
        old = self.rng.choice(targets)
        # same size, so field offsets chosen for `old` stay in bounds
        new = self.alloc(old.words)
        i = self.stack.index(old)
        depth = len(self.stack) - 1 - i
        if depth > 16:
            raise _Budget()
        self.a.op(f"SWAP{depth}", "POP")
        self.stack.pop()
        self.stack[i] = new

    def write(self) -> None:
        targets = self.ptrs(primary_only=True)
        if not targets:
            return
        v = self.rng.choice(targets)
        f = self.rng.randrange(v.words)
        self.a.push(self.rng.randint(0, 0x1F))
        self.stack.append(Var(0))
        self.dup(v)
        self.stack.pop()
        if f:
            self.a.push(0x20 * f).op("ADD")
        self.a.op("MSTORE")

    def read(self) -> None:
        targets = self.ptrs()
        if not targets:
            return
        v = self.rng.choice(targets)
        f = self.rng.randrange(v.words)
        self.dup(v)
        if f:
            self.a.push(0x20 * f).op("ADD")
        self.a.op("MLOAD", "POP")

    def store_ptr(self) -> None:
        dst = self.ptrs(primary_only=True)
        src = self.ptrs()
        if not dst or not src:
            return
        d, s = self.rng.choice(dst), self.rng.choice(src)
        f = self.rng.randrange(d.words)
        self.dup(s)
        self.stack.append(Var(0))
        self.dup(d)
        self.stack.pop()
        if f:
            self.a.push(0x20 * f).op("ADD")
        self.a.op("MSTORE")

    def load_ptr(self) -> None:
        src = self.ptrs()
        if not src or len(self.stack) >= MAX_VARS:
            return
        v = self.rng.choice(src)
        f = self.rng.randrange(v.words)
        self.dup(v)
        if f:
            self.a.push(0x20 * f).op("ADD")
        self.a.op("MLOAD")
        self.stack.append(Var(next(self.ids), self.rng.randint(1, 2), primary=False))

    def call(self, keep: bool) -> None:
        a = self.a
        a.push(0x40).op("MLOAD")
        t = Var(next(self.ids), 2)
        self.stack.append(t)
        a.push(CALL_SELECTOR, 4).push(0xE0).op("SHL", "DUP2", "MSTORE")
        a.push(0x40).op("DUP2").push(4).op("DUP4").push(CALL_TARGET).op("GAS", "STATICCALL", "POP")
        if self.rng.random() < 0.5:
            a.op("DUP1").push(0x20).op("ADD", "MLOAD", "POP")
        if keep:
            a.push(0x40).op("MLOAD", "RETURNDATASIZE", "ADD").push(0x40).op("MSTORE")
        else:
            a.op("POP")
            self.stack.pop()

    def neutral(self) -> None:
        """One statement that leaves the stack shape unchanged."""
        kind = self.rng.choices(
            ["write", "read", "store_ptr", "realloc", "call"], [4, 3, 2, 2, 1])[0]
        if kind == "call":
            self.call(keep=False)
        else:
            getattr(self, kind)()

    def branch(self) -> None:
        a = self.a
        other, end = self.fresh("else"), self.fresh("end")
        a.push(0x20 * self.rng.randint(0, 1)).op("CALLDATALOAD").jumpi(other)
        shape = list(self.stack)
        for _ in range(self.rng.randint(1, 2)):
            self.neutral()
        then_stack = list(self.stack)
        a.jump(end)
        a.jumpdest(other)
        self.stack = list(shape)
        for _ in range(self.rng.randint(0, 2)):
            self.neutral()
        a.jumpdest(end)
        # shapes agree; sizes may differ per path, so keep the smaller one
        merged = []
        for x, y in zip(then_stack, self.stack):
            if x is y:
                merged.append(x)
            else:
                merged.append(Var(next(self.ids), min(x.words, y.words), x.primary and y.primary))
        self.stack = merged

    def loop(self) -> None:
        a = self.a
        head = self.fresh("loop")
        a.push(self.rng.randint(2, 3))
        counter = Var(0)
        self.stack.append(counter)
        a.jumpdest(head)
        before = list(self.stack)
        for _ in range(self.rng.randint(1, 3)):
            self.neutral()
        # values replaced inside the body flow back to the head
        self.stack = [x if x is y else Var(next(self.ids), min(x.words, y.words), x.primary and y.primary)
                      for x, y in zip(before, self.stack)]
        a.push(1).op("SWAP1", "SUB", "DUP1").jumpi(head).op("POP")
        self.stack.pop()
        self.loop_used = True

    def statement(self) -> None:
        options = ["alloc", "write", "read", "store_ptr", "load_ptr", "branch", "call", "realloc"]
        weights = [4, 5, 3, 2, 2, 2, 1, 1]
        if not self.loop_used:
            options.append("loop")
            weights.append(2)
        if len(self.stack) >= MAX_VARS:
            weights[0] = weights[4] = weights[6] = 0
        kind = self.rng.choices(options, weights)[0]
        if kind == "call":
            self.call(keep=self.rng.random() < 0.6)
        elif kind == "alloc":
            self.alloc()
        else:
            getattr(self, kind)()

    def terminate(self, extra_reads: tuple[int, ...]) -> int:
        a = self.a
        a.jumpdest(self.fresh("exit"))
        start = a.pc
        for pos in extra_reads:
            self.dup(self.stack[pos])
            a.op("MLOAD", "POP")
        ptrs = self.ptrs()
        choice = self.rng.random()
        if not ptrs or choice < 0.15:
            a.op("STOP")
        elif choice < 0.25:
            a.push(0).op("DUP1", "REVERT")
        elif choice < 0.65:
            v = self.rng.choice(ptrs)
            a.push(0x20 * v.words)
            self.stack.append(Var(0))
            self.dup(v)
            self.stack.pop()
            a.op("RETURN")
        else:
            v = self.rng.choice(ptrs)
            a.push(0x40).op("MLOAD")
            self.stack.append(Var(0))
            self.dup(v)
            self.stack.pop()
            a.op("MLOAD", "DUP2", "MSTORE").push(0x20).op("SWAP1", "RETURN")
        return start


def generate(seed: int, *, extra_reads: tuple[int, ...] = (),
             max_instructions: int = MAX_INSTRUCTIONS) -> GeneratedProgram:
    """Build the program for `seed`.

    extra_reads lists stack positions (from the bottom) whose pointer gets
    one more MLOAD just before the program ends; the rest of the program is
    identical for the same seed.
    """
    g = _Gen(seed, max_instructions)
    g.a.push(0x80).push(0x40).op("MSTORE")
    g.alloc()
    # reserve room for the longest terminator (9 instructions plus marker)
    g.limit = max_instructions - 10
    for _ in range(40):
        snap = g.a.snapshot()
        state = (list(g.stack), g.loop_used)
        try:
            g.statement()
            g.check()
        except _Budget:
            g.a.restore(snap)
            g.stack, g.loop_used = state
            break
    end_stack = list(g.stack)
    end_pc = g.terminate(tuple(extra_reads))
    count = len(g.a)
    calldata = [word(x) + word(y) for x in (0, 1) for y in (0, 1)]
    stubs = {"*": CallStub(word(0x11) + word(0x1F))}
    return GeneratedProgram(seed, g.a.build(), calldata, stubs, count, g.loop_used,
                            end_pc, end_stack)
