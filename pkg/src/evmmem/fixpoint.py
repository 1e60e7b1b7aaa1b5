"""Worklist solver for per-program-point dataflow equations over a Cfg."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generic, Optional, TypeVar

from .asm import Instruction
from .cfg import Cfg, CfgNode, ProgramPoint
from .errors import NO_DEADLINE, AnalysisError, Deadline

V = TypeVar("V")

DEFAULT_BUDGET = 10 ** 6


class NonMonotoneTransfer(AnalysisError):
    pass


class IterationBudgetExceeded(AnalysisError):
    pass


@dataclass(frozen=True)
class DomainContract(Generic[V]):
    bottom: V
    join: Callable[[V, V], V]
    leq: Callable[[V, V], bool]
    transfer: Callable[[Instruction, V, ProgramPoint], V]
    # state at the contract entry; defaults to bottom
    entry: Any = None

    @property
    def initial(self) -> V:
        return self.bottom if self.entry is None else self.entry


@dataclass
class Solution(Generic[V]):
    pre: dict[ProgramPoint, V] = field(default_factory=dict)
    post: dict[ProgramPoint, V] = field(default_factory=dict)
    visits: int = 0

    def __len__(self):
        return len(self.pre)


def solve(cfg: Cfg, domain: DomainContract, *, seed: Optional[int] = None,
          budget: int = DEFAULT_BUDGET, check_monotone: bool = False,
          deadline: Deadline = NO_DEADLINE) -> Solution:
    """Least solution of the dataflow equations of `domain` over `cfg`.

    With `seed` set the worklist is drained in a pseudo-random order instead
    of FIFO; the result must not depend on it.
    """
    sol = Solution()
    if cfg.entry is None:
        return sol
    entry_state: dict[CfgNode, Any] = {n: domain.bottom for n in cfg.order}
    entry_state[cfg.entry] = domain.initial
    exit_state: dict[CfgNode, Any] = {}
    rng = random.Random(seed) if seed is not None else None
    pending: deque[CfgNode] = deque([cfg.entry])
    queued = {cfg.entry}
    reached = {cfg.entry}
    transfer, join, leq = domain.transfer, domain.join, domain.leq

    while pending:
        deadline.check()
        if rng is not None and len(pending) > 1:
            k = rng.randrange(len(pending))
            pending.rotate(-k)
            node = pending.popleft()
            pending.rotate(k)
        else:
            node = pending.popleft()
        queued.discard(node)
        sol.visits += 1
        if sol.visits > budget:
            raise IterationBudgetExceeded(f"more than {budget} node visits")

        state = entry_state[node]
        for p in node.instructions:
            sol.pre[p] = state
            state = transfer(cfg.instruction(p), state, p)
            sol.post[p] = state
        if check_monotone and node in exit_state and not leq(exit_state[node], state):
            raise NonMonotoneTransfer(f"exit state of {node.label} shrank")
        exit_state[node] = state

        for succ in node.successors:
            old = entry_state[succ]
            new = join(old, state)
            # first arrival always schedules the node, even with an equal state
            if succ in reached and leq(new, old):
                continue
            reached.add(succ)
            entry_state[succ] = new
            if succ not in queued:
                pending.append(succ)
                queued.add(succ)
    return sol
