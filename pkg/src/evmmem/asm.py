"""EVM opcode table, disassembler and memory-effect metadata."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional, Sequence

import cbor2


class Fused(Enum):
    MLOAD_FMP = "FUSED_MLOAD_FMP"
    MSTORE_FMP = "FUSED_MSTORE_FMP"


FUSED_MLOAD_FMP = Fused.MLOAD_FMP
FUSED_MSTORE_FMP = Fused.MSTORE_FMP

FREE_MEMORY_POINTER = 0x40


@dataclass(frozen=True)
class Opcode:
    mnemonic: str
    byte: int
    pops: int
    pushes: int
    is_terminator: bool = False

    @property
    def push_size(self) -> int:
        if 0x60 <= self.byte <= 0x7F:
            return self.byte - 0x5F
        return 0

    @property
    def is_push(self) -> bool:
        return self.push_size > 0

    @property
    def is_dup(self) -> bool:
        return 0x80 <= self.byte <= 0x8F

    @property
    def is_swap(self) -> bool:
        return 0x90 <= self.byte <= 0x9F

    @property
    def index(self) -> int:
        """The i of DUPi/SWAPi, 0 for anything else."""
        if self.is_dup:
            return self.byte - 0x7F
        if self.is_swap:
            return self.byte - 0x8F
        return 0

    @property
    def net(self) -> int:
        return self.pushes - self.pops

    def __str__(self) -> str:
        return self.mnemonic


_BASE = [
    # byte, mnemonic, pops, pushes, terminator
    (0x00, "STOP", 0, 0, True),
    (0x01, "ADD", 2, 1, False),
    (0x02, "MUL", 2, 1, False),
    (0x03, "SUB", 2, 1, False),
    (0x04, "DIV", 2, 1, False),
    (0x05, "SDIV", 2, 1, False),
    (0x06, "MOD", 2, 1, False),
    (0x07, "SMOD", 2, 1, False),
    (0x08, "ADDMOD", 3, 1, False),
    (0x09, "MULMOD", 3, 1, False),
    (0x0A, "EXP", 2, 1, False),
    (0x0B, "SIGNEXTEND", 2, 1, False),
    (0x10, "LT", 2, 1, False),
    (0x11, "GT", 2, 1, False),
    (0x12, "SLT", 2, 1, False),
    (0x13, "SGT", 2, 1, False),
    (0x14, "EQ", 2, 1, False),
    (0x15, "ISZERO", 1, 1, False),
    (0x16, "AND", 2, 1, False),
    (0x17, "OR", 2, 1, False),
    (0x18, "XOR", 2, 1, False),
    (0x19, "NOT", 1, 1, False),
    (0x1A, "BYTE", 2, 1, False),
    (0x1B, "SHL", 2, 1, False),
    (0x1C, "SHR", 2, 1, False),
    (0x1D, "SAR", 2, 1, False),
    (0x20, "KECCAK256", 2, 1, False),
    (0x30, "ADDRESS", 0, 1, False),
    (0x31, "BALANCE", 1, 1, False),
    (0x32, "ORIGIN", 0, 1, False),
    (0x33, "CALLER", 0, 1, False),
    (0x34, "CALLVALUE", 0, 1, False),
    (0x35, "CALLDATALOAD", 1, 1, False),
    (0x36, "CALLDATASIZE", 0, 1, False),
    (0x37, "CALLDATACOPY", 3, 0, False),
    (0x38, "CODESIZE", 0, 1, False),
    (0x39, "CODECOPY", 3, 0, False),
    (0x3A, "GASPRICE", 0, 1, False),
    (0x3B, "EXTCODESIZE", 1, 1, False),
    (0x3C, "EXTCODECOPY", 4, 0, False),
    (0x3D, "RETURNDATASIZE", 0, 1, False),
    (0x3E, "RETURNDATACOPY", 3, 0, False),
    (0x3F, "EXTCODEHASH", 1, 1, False),
    (0x40, "BLOCKHASH", 1, 1, False),
    (0x41, "COINBASE", 0, 1, False),
    (0x42, "TIMESTAMP", 0, 1, False),
    (0x43, "NUMBER", 0, 1, False),
    (0x44, "DIFFICULTY", 0, 1, False),
    (0x45, "GASLIMIT", 0, 1, False),
    (0x46, "CHAINID", 0, 1, False),
    (0x47, "SELFBALANCE", 0, 1, False),
    (0x48, "BASEFEE", 0, 1, False),
    (0x50, "POP", 1, 0, False),
    (0x51, "MLOAD", 1, 1, False),
    (0x52, "MSTORE", 2, 0, False),
    (0x53, "MSTORE8", 2, 0, False),
    (0x54, "SLOAD", 1, 1, False),
    (0x55, "SSTORE", 2, 0, False),
    (0x56, "JUMP", 1, 0, True),
    (0x57, "JUMPI", 2, 0, False),
    (0x58, "PC", 0, 1, False),
    (0x59, "MSIZE", 0, 1, False),
    (0x5A, "GAS", 0, 1, False),
    (0x5B, "JUMPDEST", 0, 0, False),
    (0xA0, "LOG0", 2, 0, False),
    (0xA1, "LOG1", 3, 0, False),
    (0xA2, "LOG2", 4, 0, False),
    (0xA3, "LOG3", 5, 0, False),
    (0xA4, "LOG4", 6, 0, False),
    (0xF0, "CREATE", 3, 1, False),
    (0xF1, "CALL", 7, 1, False),
    (0xF2, "CALLCODE", 7, 1, False),
    (0xF3, "RETURN", 2, 0, True),
    (0xF4, "DELEGATECALL", 6, 1, False),
    (0xF5, "CREATE2", 4, 1, False),
    (0xFA, "STATICCALL", 6, 1, False),
    (0xFD, "REVERT", 2, 0, True),
    (0xFE, "INVALID", 0, 0, True),
    (0xFF, "SELFDESTRUCT", 1, 0, True),
]


def _build_table() -> tuple[Opcode, ...]:
    table: dict[int, Opcode] = {}
    for byte, name, pops, pushes, term in _BASE:
        table[byte] = Opcode(name, byte, pops, pushes, term)
    for n in range(1, 33):
        table[0x5F + n] = Opcode(f"PUSH{n}", 0x5F + n, 0, 1)
    for n in range(1, 17):
        # DUPn needs n items and leaves n+1; SWAPn needs n+1 and leaves n+1.
        table[0x7F + n] = Opcode(f"DUP{n}", 0x7F + n, n, n + 1)
        table[0x8F + n] = Opcode(f"SWAP{n}", 0x8F + n, n + 1, n + 1)
    out = []
    for b in range(256):
        out.append(table.get(b, Opcode("INVALID", b, 0, 0, True)))
    return tuple(out)


OPCODES: tuple[Opcode, ...] = _build_table()
BY_NAME: dict[str, Opcode] = {op.mnemonic: op for op in OPCODES if op.mnemonic != "INVALID"}
BY_NAME["INVALID"] = OPCODES[0xFE]


def opcode(name: str) -> Opcode:
    return BY_NAME[name.upper()]


HALTING = frozenset({"STOP", "RETURN", "REVERT", "INVALID", "SELFDESTRUCT"})

_READ_POS = {
    "MLOAD": 0, "KECCAK256": 0, "RETURN": 0, "REVERT": 0,
    "LOG0": 0, "LOG1": 0, "LOG2": 0, "LOG3": 0, "LOG4": 0,
    "CREATE": 1, "CREATE2": 1,
    "CALL": 3, "CALLCODE": 3, "DELEGATECALL": 2, "STATICCALL": 2,
}
_WRITE_POS = {
    "CALL": 5, "CALLCODE": 5, "DELEGATECALL": 4, "STATICCALL": 4,
    "MSTORE": 0, "MSTORE8": 0, "CALLDATACOPY": 0, "CODECOPY": 0,
    "RETURNDATACOPY": 0, "EXTCODECOPY": 1,
}


def mem_read_pos(op: Opcode) -> Optional[int]:
    return _READ_POS.get(op.mnemonic)


def mem_write_pos(op: Opcode) -> Optional[int]:
    return _WRITE_POS.get(op.mnemonic)


@dataclass(frozen=True)
class Instruction:
    pc: int
    op: Opcode
    push_bytes: bytes = b""
    fused: Optional[Fused] = None

    @property
    def size(self) -> int:
        return 1 + len(self.push_bytes)

    @property
    def next_pc(self) -> int:
        return self.pc + self.size

    @property
    def push_value(self) -> Optional[int]:
        if not self.op.is_push:
            return None
        return int.from_bytes(self.push_bytes, "big")

    @property
    def name(self) -> str:
        return self.op.mnemonic

    def encode(self) -> bytes:
        return bytes([self.op.byte]) + self.push_bytes

    def __str__(self) -> str:
        text = f"{self.pc:#x}: {self.op.mnemonic}"
        if self.op.is_push:
            text += f" {self.push_value:#x}"
        if self.fused is not None:
            text += " [fmp]"
        return text


Disassembly = list  # list[Instruction]


def strip_metadata(code: bytes) -> bytes:
    if len(code) < 2:
        return code
    length = int.from_bytes(code[-2:], "big")
    if length == 0 or length + 2 > len(code):
        return code
    blob = code[-2 - length:-2]
    # solc trailers are a single CBOR map; anything else is left alone
    if not 0xA0 <= blob[0] <= 0xBF:
        return code
    stream = io.BytesIO(blob)
    try:
        value = cbor2.CBORDecoder(stream).decode()
    except Exception:
        return code
    if not isinstance(value, dict) or stream.tell() != len(blob):
        return code
    return code[:-2 - length]


def disassemble(code: bytes) -> list[Instruction]:
    out = []
    pc = 0
    n = len(code)
    while pc < n:
        op = OPCODES[code[pc]]
        size = op.push_size
        if size and pc + 1 + size > n:
            # truncated immediate: the rest of the code becomes one INVALID
            # that keeps the original byte so re-encoding is lossless
            bad = Opcode("INVALID", code[pc], 0, 0, True)
            out.append(Instruction(pc, bad, bytes(code[pc + 1:])))
            break
        out.append(Instruction(pc, op, bytes(code[pc + 1:pc + 1 + size])))
        pc += 1 + size
    return out


def assemble(instructions: Iterable[Instruction]) -> bytes:
    """Re-encode a disassembly; inverse of disassemble."""
    return b"".join(ins.encode() for ins in instructions)


def fuse_fmp_accesses(dis: Sequence[Instruction], constants: Optional[dict] = None) -> list[Instruction]:
    """Mark MLOAD/MSTORE whose address operand is the constant 0x40.

    Without `constants` only the syntactic `PUSH1 0x40` prefix is recognised.
    `constants` maps pc -> True/False for instructions whose operand was
    proven (or refuted) to be 0x40 by the CFG's constant tracking.
    """
    out = []
    prev: Optional[Instruction] = None
    for ins in dis:
        marker = None
        if ins.name in ("MLOAD", "MSTORE"):
            proven = constants.get(ins.pc) if constants else None
            syntactic = (prev is not None and prev.op.is_push
                         and prev.push_value == FREE_MEMORY_POINTER)
            if proven or (proven is None and syntactic):
                marker = FUSED_MLOAD_FMP if ins.name == "MLOAD" else FUSED_MSTORE_FMP
        out.append(replace(ins, fused=marker))
        prev = ins
    return out


def parse_code(data: bytes | str) -> bytes:
    """Accept raw bytes or hex text (optional 0x prefix, whitespace ignored)."""
    if isinstance(data, str):
        data = data.encode()
    text = b"".join(data.split())
    if text[:2].lower() == b"0x":
        text = text[2:]
    if not text:
        return b""
    try:
        if len(text) % 2 == 0:
            return bytes.fromhex(text.decode("ascii"))
    except (ValueError, UnicodeDecodeError):
        pass
    return bytes(data)


def parse_hex(text: str) -> bytes:
    """Strict hex decoding (0x prefix and whitespace allowed); raises ValueError."""
    text = "".join(text.split())
    if text[:2].lower() == "0x":
        text = text[2:]
    return bytes.fromhex(text)
