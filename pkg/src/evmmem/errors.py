import time


class AnalysisError(Exception):
    """Base class for failures that abort one contract's analysis."""


class CfgError(AnalysisError):
    pass


class UnresolvedJump(CfgError):
    def __init__(self, pc: int):
        super().__init__(f"unresolved jump at {pc:#x}")
        self.pc = pc


class CloneBudgetExceeded(CfgError):
    def __init__(self, pc: int, limit: int):
        super().__init__(f"block {pc:#x} needs more than {limit} clones")
        self.pc = pc
        self.limit = limit


class InvalidStack(CfgError):
    """Symbolic execution hit a stack underflow or overflow."""


class StackUnderflow(AnalysisError):
    pass


class UnknownProgramPoint(KeyError):
    pass


class AnalysisTimeout(AnalysisError):
    pass


class Deadline:
    """Cooperative wall-clock limit; long loops call check()."""

    def __init__(self, seconds: float | None):
        self.seconds = seconds
        self.expires = None if seconds is None else time.monotonic() + seconds
        self._tick = 0

    def check(self) -> None:
        if self.expires is None:
            return
        self._tick += 1
        if self._tick & 0xFF:
            return
        if time.monotonic() > self.expires:
            raise AnalysisTimeout(f"exceeded {self.seconds}s")

    def check_now(self) -> None:
        if self.expires is not None and time.monotonic() > self.expires:
            raise AnalysisTimeout(f"exceeded {self.seconds}s")


NO_DEADLINE = Deadline(None)
