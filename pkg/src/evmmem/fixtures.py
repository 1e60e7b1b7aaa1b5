"""Hand-assembled solc-style fixture programs with known memory behaviour.

running1: a getter that allocates and fills a struct from storage and
  returns it ABI-encoded.
running2: a wrapper that allocates two zero-initialised structs, overwrites
  one of them depending on the caller's input, and on one path makes a
  STATICCALL (transient argument/return slot) whose result is decoded into a
  fresh struct.  Landmark pcs are pinned with padding so that the slot
  allocator sits at 0x175 and the call-slot loads sit at 0x114/0x132/0x151.
running3: an array variant with two loops; one allocates a struct per
  element and stores its pointer into an array, the other replaces each
  element with a call result.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from Crypto.Hash import keccak

from .builder import Asm

ADDRESS_MASK = (1 << 160) - 1
U64_MASK = (1 << 64) - 1
CALLEE = 0xC0FFEE0000000000000000000000000000000001


def keccak256(data: bytes) -> bytes:
    h = keccak.new(digest_bits=256)
    h.update(data)
    return h.digest()


def selector(signature: str) -> int:
    return int.from_bytes(keccak256(signature.encode())[:4], "big")


def word(value: int) -> bytes:
    return (value % (1 << 256)).to_bytes(32, "big")


SEL_OWNERSHIP = selector("explicitOwnershipOf(uint256)")
SEL_OWNERSHIPS = selector("explicitOwnershipsOf(uint256[])")


@dataclass
class CallStub:
    returndata: bytes = b""
    success: bool = True


@dataclass
class Fixture:
    name: str
    code: bytes
    calldata: list[bytes] = field(default_factory=list)
    stubs: dict = field(default_factory=dict)  # address int or "*" -> CallStub
    storage: dict[int, int] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)
    expected: Optional[dict] = None

    def to_descriptor(self) -> dict:
        stubs = {}
        for addr, stub in self.stubs.items():
            key = addr if isinstance(addr, str) else f"{addr:#x}"
            stubs[key] = {"returndata": stub.returndata.hex(), "success": stub.success}
        out = {
            "name": self.name,
            "bytecode": self.code.hex(),
            "calldata": [c.hex() for c in self.calldata],
            "stubs": stubs,
            "storage": {f"{k:#x}": f"{v:#x}" for k, v in sorted(self.storage.items())},
        }
        if self.expected is not None:
            out["expected"] = self.expected
        return out

    @classmethod
    def from_descriptor(cls, d: dict) -> "Fixture":
        stubs = {}
        for key, s in d.get("stubs", {}).items():
            addr = key if key == "*" else int(key, 16)
            stubs[addr] = CallStub(bytes.fromhex(s.get("returndata", "")), s.get("success", True))
        return cls(
            name=d["name"],
            code=bytes.fromhex(d["bytecode"].removeprefix("0x")),
            calldata=[bytes.fromhex(c.removeprefix("0x")) for c in d.get("calldata", [])],
            stubs=stubs,
            storage={int(k, 16): int(v, 16) for k, v in d.get("storage", {}).items()},
            expected=d.get("expected"),
        )


def _prologue(a: Asm) -> None:
    a.push(0x80).push(0x40).op("MSTORE")


def _dispatch(a: Asm, sel: int, target: str) -> None:
    a.push(4).op("CALLDATASIZE", "LT").jumpi("revert")
    a.push(0).op("CALLDATALOAD").push(0xE0).op("SHR")
    a.op("DUP1").push(sel, 4).op("EQ").jumpi(target)
    a.jumpdest("revert").push(0).op("DUP1", "REVERT")


def _allocator(a: Asm, name: str = "alloc") -> None:
    """Reserve a 3-word struct and zero its fields; returns its baseref."""
    a.jumpdest(name)
    a.push(0x40).op("MLOAD", "DUP1").push(0x60).op("ADD").push(0x40).op("MSTORE")
    a.op("DUP1").push(0).push(ADDRESS_MASK, 20).op("AND", "SWAP1", "MSTORE")
    a.push(0x20).op("DUP2", "ADD").push(0).push((1 << 56) - 1, 7).op("AND", "DUP2", "MSTORE", "POP")
    a.push(0x40).op("DUP2", "ADD").push(0).op("DUP2", "MSTORE", "POP")
    a.op("SWAP1", "JUMP")


def _encoder(a: Asm, name: str = "enc") -> None:
    """[ret, dst, src] -> [end]: copy a 3-word struct to dst."""
    a.jumpdest(name)
    a.op("DUP1", "MLOAD", "DUP3", "MSTORE")
    for off in (0x20, 0x40):
        a.op("DUP1").push(off).op("ADD", "MLOAD", "DUP3").push(off).op("ADD", "MSTORE")
    a.op("POP").push(0x60).op("ADD", "SWAP1", "JUMP")


def _return_tail(a: Asm, name: str, ret: str) -> None:
    a.jumpdest(name).push(0x40).op("MLOAD").push_label(ret).op("SWAP2").jump("enc")


def _return_block(a: Asm, name: str) -> None:
    a.jumpdest(name).push(0x40).op("MLOAD", "DUP1", "SWAP2", "SUB", "SWAP1", "RETURN")


def _packed_ownership(addr: int, ts: int, burned: bool) -> int:
    return addr | (ts << 0xA0) | ((1 if burned else 0) << 0xE0)


def running1() -> Fixture:
    a = Asm()
    _prologue(a)
    _dispatch(a, SEL_OWNERSHIP, "wrapper")
    a.jumpdest("wrapper").push_label("tail").push(4).op("CALLDATALOAD").jump("body")
    a.jumpdest("body").push_label("filled").jump("alloc")
    a.jumpdest("filled")
    a.op("DUP2", "SLOAD")
    a.op("DUP1").push(ADDRESS_MASK, 20).op("AND", "DUP3", "MSTORE")
    a.op("DUP1").push(0xA0).op("SHR").push(U64_MASK, 8).op("AND", "DUP3").push(0x20).op("ADD", "MSTORE")
    a.push(0xE0).op("SHR").push(1).op("AND", "DUP2").push(0x40).op("ADD", "MSTORE")
    a.op("SWAP1", "POP", "SWAP1", "JUMP")
    _return_tail(a, "tail", "ret")
    _return_block(a, "ret")
    _encoder(a)
    _allocator(a)
    code = a.build()
    token = 7
    return Fixture(
        "running1", code,
        calldata=[word(SEL_OWNERSHIP << 224)[:4] + word(token),
                  word(SEL_OWNERSHIP << 224)[:4] + word(8)],
        storage={token: _packed_ownership(0xBEEF, 1234, False)},
        labels=dict(a.labels),
    )


def ownership_stub() -> CallStub:
    return CallStub(word(0xBEEF) + word(1234) + word(0))


def running2(read_first: bool = False, read_second: bool = False) -> Fixture:
    """Two zero-initialised structs; path B also calls out and decodes.

    read_first / read_second insert an extra read of the first (pc 0x178)
    or third (0x178_1) allocation so their zero-initialising writes become
    observed.
    """
    a = Asm()
    _prologue(a)
    _dispatch(a, SEL_OWNERSHIP, "wrapper")
    assert a.pc == 0x23
    a.jumpdest("wrapper").push_label("tail").push(4).op("CALLDATALOAD").jump("body")
    a.jumpdest("bodyexit").op("SWAP1", "POP", "SWAP1", "JUMP")
    a.jumpdest("pathA").op("SWAP1", "POP").jump("bodyexit")
    a.jumpdest("ret_c").op("SWAP2", "POP", "POP").jump("bodyexit")
    a.pad_to(0x4A)
    _return_tail(a, "tail", "ret")
    a.pad_to(0x57)
    _return_block(a, "ret")
    assert a.pc == 0x60
    a.jumpdest("body").push_label("ret_a").jump("alloc")
    a.jumpdest("ret_a").push_label("ret_b").jump("alloc")
    a.jumpdest("ret_b")
    if read_first:
        a.op("DUP2", "MLOAD", "POP")
    a.push(0x10).op("DUP4", "LT").jumpi("pathA")
    a.push_label("ret_c").op("DUP4").jump("ownershipAt")
    # decode a 3-word struct from memory: [ret, head, end] -> [struct]
    a.jumpdest("dec").push(0x40).op("MLOAD", "DUP1").push(0x60).op("ADD").push(0x40).op("MSTORE")
    a.op("DUP3", "MLOAD", "DUP2", "MSTORE")
    for off in (0x20, 0x40):
        a.op("DUP3").push(off).op("ADD", "MLOAD", "DUP2").push(off).op("ADD", "MSTORE")
    a.op("SWAP3", "SWAP2", "POP", "POP", "JUMP")
    _encoder(a)
    a.jumpdest("ret_e")
    if read_second:
        a.op("DUP5", "MLOAD", "POP")
    a.op("SWAP6", "SWAP5", "POP", "POP", "POP", "POP", "POP", "JUMP")
    a.pad_to(0x101)
    a.jumpdest("ownershipAt").push_label("ret_d").jump("alloc")
    a.jumpdest("ret_d").push(0).op("SLOAD").push(SEL_OWNERSHIP, 4).push(0x40).op("MLOAD")
    assert a.pc == 0x115
    a.op("DUP2").push(0xE0).op("SHL", "DUP2", "MSTORE")
    a.op("DUP5", "DUP2").push(4).op("ADD", "MSTORE")
    a.push(0x60).op("DUP2").push(0x24)
    a.pad_to(0x130, "nop")
    a.push(0x40).op("MLOAD", "DUP7")
    a.pad_to(0x138, "nop")
    a.op("GAS", "STATICCALL", "POP")
    a.pad_to(0x14F, "nop")
    a.push(0x40).op("MLOAD", "RETURNDATASIZE", "DUP2", "ADD", "DUP1")
    a.pad_to(0x15E, "nop")
    a.push(0x40).op("MSTORE")
    a.push_label("ret_e").op("SWAP2", "SWAP1").jump("dec")
    a.pad_to(0x175)
    _allocator(a)
    assert a.labels["alloc"] == 0x175 and a.pc == 0x1B8
    code = a.build()
    head = word(SEL_OWNERSHIP << 224)[:4]
    return Fixture(
        "running2", code,
        calldata=[head + word(1), head + word(0x20), head + word(0x10),
                  word(0xDEADBEEF << 224)[:4] + word(1), b"\x01\x02"],
        stubs={"*": ownership_stub()},
        storage={0: CALLEE},
        labels=dict(a.labels),
    )


def running3() -> Fixture:
    """Array of structs built in a loop, then overwritten with call results."""
    a = Asm()
    _prologue(a)
    _dispatch(a, SEL_OWNERSHIPS, "wrapper")
    # copy the calldata uint256[] into memory: [sel, tail, arr]
    a.jumpdest("wrapper").push_label("tail")
    a.push(4).op("CALLDATALOAD").push(4).op("ADD")
    a.op("DUP1", "CALLDATALOAD")
    a.push(0x40).op("MLOAD")
    a.op("DUP2").push(1).op("ADD").push(5).op("SHL", "DUP2", "ADD").push(0x40).op("MSTORE")
    a.op("DUP2", "DUP2", "MSTORE")
    a.op("DUP2").push(5).op("SHL")
    a.op("DUP4").push(0x20).op("ADD")
    a.op("DUP3").push(0x20).op("ADD")
    a.op("CALLDATACOPY")
    a.op("SWAP2", "POP", "POP").jump("body")

    # [sel, tail, ids] -> allocate the result array and fill it with fresh structs
    a.jumpdest("body")
    a.op("DUP1", "MLOAD")
    a.push(0x40).op("MLOAD")
    a.op("DUP2").push(1).op("ADD").push(5).op("SHL", "DUP2", "ADD").push(0x40).op("MSTORE")
    a.op("DUP2", "DUP2", "MSTORE")
    a.push(0)
    a.jumpdest("initloop")
    a.op("DUP3", "DUP2", "LT", "ISZERO").jumpi("initdone")
    a.push_label("ret_i").jump("alloc")
    a.jumpdest("ret_i")
    a.op("DUP3", "DUP3").push(5).op("SHL", "ADD").push(0x20).op("ADD")
    a.label("pp1").op("MSTORE")
    a.push(1).op("ADD").jump("initloop")
    a.jumpdest("initdone").op("POP")

    # second loop: ownerships[i] = decode(staticcall(explicitOwnershipOf(ids[i])))
    a.push(0)
    a.jumpdest("callloop")
    a.op("DUP3", "DUP2", "LT", "ISZERO").jumpi("calldone")
    a.op("DUP4", "DUP2").push(5).op("SHL", "ADD").push(0x20).op("ADD", "MLOAD")
    a.push(0x40).op("MLOAD")
    a.push(SEL_OWNERSHIP, 4).push(0xE0).op("SHL", "DUP2", "MSTORE")
    a.op("DUP2", "DUP2").push(4).op("ADD", "MSTORE")
    a.push(0x60).op("DUP2").push(0x24).push(0x40).op("MLOAD")
    a.push(0).op("SLOAD", "GAS", "STATICCALL", "POP")
    a.push(0x40).op("MLOAD", "RETURNDATASIZE", "DUP2", "ADD").push(0x40).op("MSTORE")
    a.push(0x40).op("MLOAD", "DUP1").push(0x60).op("ADD").push(0x40).op("MSTORE")
    a.op("DUP2", "MLOAD", "DUP2", "MSTORE")
    for off in (0x20, 0x40):
        a.op("DUP2").push(off).op("ADD", "MLOAD", "DUP2").push(off).op("ADD", "MSTORE")
    a.op("DUP6", "DUP6").push(5).op("SHL", "ADD").push(0x20).op("ADD")
    a.label("pp2").op("MSTORE")
    a.op("POP", "POP", "POP")
    a.push(1).op("ADD").jump("callloop")
    a.jumpdest("calldone").op("POP", "SWAP2", "POP", "POP", "SWAP1", "JUMP")

    # [sel, arr] -> ABI-encode the struct array and return it
    a.jumpdest("tail")
    a.push(0x40).op("MLOAD")
    a.push(0x20).op("DUP2", "MSTORE")
    a.op("DUP2", "MLOAD")
    a.op("DUP1", "DUP3").push(0x20).op("ADD", "MSTORE")
    a.push(0)
    a.jumpdest("encloop")
    a.op("DUP2", "DUP2", "LT", "ISZERO").jumpi("encdone")
    a.op("DUP4", "DUP2").push(5).op("SHL", "ADD").push(0x20).op("ADD", "MLOAD")
    a.op("DUP2").push(0x60).op("MUL", "DUP5", "ADD").push(0x40).op("ADD")
    a.op("DUP2", "MLOAD", "DUP2", "MSTORE")
    for off in (0x20, 0x40):
        a.op("DUP2").push(off).op("ADD", "MLOAD", "DUP2").push(off).op("ADD", "MSTORE")
    a.op("POP", "POP").push(1).op("ADD").jump("encloop")
    a.jumpdest("encdone").op("POP")
    a.push(0x60).op("MUL").push(0x40).op("ADD")
    a.push(0x40).op("MLOAD", "RETURN")

    _allocator(a)
    code = a.build()

    def call(ids):
        data = word(SEL_OWNERSHIPS << 224)[:4] + word(0x20) + word(len(ids))
        return data + b"".join(word(i) for i in ids)

    return Fixture(
        "running3", code,
        calldata=[call([]), call([5]), call([7, 9]), call([1, 2, 3])],
        stubs={"*": ownership_stub()},
        storage={0: CALLEE},
        labels=dict(a.labels),
    )


def straight_alloc() -> Fixture:
    """The bare slot reservation sequence followed by three field writes."""
    a = Asm()
    a.push(0x80).push(0x40).op("MSTORE")
    a.push(0x40).op("MLOAD", "DUP1").push(0x60).op("ADD").push(0x40).op("MSTORE")
    a.push(1).op("DUP2", "MSTORE")
    a.push(2).op("DUP2").push(0x20).op("ADD", "MSTORE")
    a.push(3).op("DUP2").push(0x40).op("ADD", "MSTORE")
    a.push(0x60).op("SWAP1", "RETURN")
    return Fixture("straight_alloc", a.build(), calldata=[b""], labels=dict(a.labels))


RUNNING = {"running1": running1, "running2": running2, "running3": running3}


def all_fixtures() -> list[Fixture]:
    return [f() for f in RUNNING.values()]
