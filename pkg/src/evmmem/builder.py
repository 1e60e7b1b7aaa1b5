"""A tiny label-aware EVM assembler for building test programs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

from .asm import BY_NAME


@dataclass
class _Op:
    name: str
    imm: Union[int, str, None] = None  # int value or label name
    width: int = 0

    @property
    def size(self) -> int:
        return 1 + self.width


@dataclass
class Asm:
    """Append-only program builder.

    >>> a = Asm(); a.push(4); a.op("JUMP"); a.jumpdest("end"); a.op("STOP")
    >>> a.build().hex()
    '6004565b00'
    """

    items: list = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)
    pc: int = 0

    def op(self, *names: str) -> "Asm":
        for name in names:
            name = name.upper()
            if name not in BY_NAME or name.startswith("PUSH"):
                raise ValueError(f"use push() for {name}" if name.startswith("PUSH") else f"unknown opcode {name}")
            self._add(_Op(name))
        return self

    def push(self, value: int, width: int | None = None) -> "Asm":
        if width is None:
            width = max(1, (value.bit_length() + 7) // 8)
        if not 1 <= width <= 32 or value >= 1 << (8 * width):
            raise ValueError(f"{value:#x} does not fit PUSH{width}")
        self._add(_Op(f"PUSH{width}", value, width))
        return self

    def push_label(self, label: str, width: int = 2) -> "Asm":
        self._add(_Op(f"PUSH{width}", label, width))
        return self

    def label(self, name: str) -> "Asm":
        if name in self.labels:
            raise ValueError(f"duplicate label {name}")
        self.labels[name] = self.pc
        return self

    def jumpdest(self, name: str | None = None) -> "Asm":
        if name is not None:
            self.label(name)
        return self.op("JUMPDEST")

    def jump(self, label: str) -> "Asm":
        return self.push_label(label).op("JUMP")

    def jumpi(self, label: str) -> "Asm":
        return self.push_label(label).op("JUMPI")

    def pad_to(self, target: int, filler: str = "invalid") -> "Asm":
        """Advance to `target` with INVALID bytes or stack-neutral no-ops."""
        gap = target - self.pc
        if gap < 0:
            raise ValueError(f"already at {self.pc:#x}, past {target:#x}")
        if filler == "invalid":
            for _ in range(gap):
                self.op("INVALID")
            return self
        if gap == 1:
            raise ValueError("cannot fill a single byte without a JUMPDEST")
        while gap:
            if gap == 3 or gap == 5:
                self.push(0).op("POP")
                gap -= 3
            else:
                self.op("PC", "POP")
                gap -= 2
        return self

    def snapshot(self) -> tuple:
        return (len(self.items), self.pc, dict(self.labels))

    def restore(self, snap: tuple) -> None:
        n, self.pc, labels = snap
        del self.items[n:]
        self.labels = dict(labels)

    def _add(self, item: _Op) -> None:
        self.items.append(item)
        self.pc += item.size

    def build(self) -> bytes:
        out = bytearray()
        for it in self.items:
            out.append(BY_NAME[it.name].byte)
            if it.width:
                value = self.labels[it.imm] if isinstance(it.imm, str) else it.imm
                out += value.to_bytes(it.width, "big")
        return bytes(out)

    def __len__(self) -> int:
        return len(self.items)
