import pytest

from evmmem.asm import FUSED_MLOAD_FMP, FUSED_MSTORE_FMP, disassemble
from evmmem.builder import Asm
from evmmem.cfg import ProgramPoint, build_blocks, build_cfg, pp
from evmmem.errors import CloneBudgetExceeded, InvalidStack, UnknownProgramPoint, UnresolvedJump
from evmmem.fixtures import running1, running2, running3
from evmmem.gen import generate
from evmmem.oracle import check_cfg_soundness, execute


def cfg_of(asm_or_code, **kw):
    code = asm_or_code.build() if isinstance(asm_or_code, Asm) else asm_or_code
    return build_cfg(disassemble(code), **kw)


def test_program_point_labels():
    assert ProgramPoint(0x175).label == "0x175"
    assert ProgramPoint(0x175, 1).label == "0x175_0"
    assert ProgramPoint(0x175, 2).label == "0x175_1"
    assert pp("0x178_1") == ProgramPoint(0x178, 2)
    assert pp("0x19a") == ProgramPoint(0x19A, 0)
    with pytest.raises(ValueError):
        pp("178")


def test_blocks_single_stop():
    blocks = build_blocks(disassemble(b"\x00"))
    assert list(blocks) == [0]
    assert [i.name for i in blocks[0].instructions] == ["STOP"]


def test_blocks_slot_reservation_has_no_inner_leaders():
    a = Asm().pad_to(0x175)
    a.jumpdest().push(0x40).op("MLOAD", "DUP1").push(0x60).op("ADD").push(0x40).op("MSTORE", "STOP")
    blocks = build_blocks(disassemble(a.build()))
    assert 0x175 in blocks
    assert [i.pc for i in blocks[0x175].instructions] == [0x175, 0x176, 0x178, 0x179, 0x17A,
                                                          0x17C, 0x17D, 0x17F, 0x180]


def test_jump_makes_two_blocks():
    # PUSH1 3; JUMP; JUMPDEST@3; STOP (the JUMPDEST sits at 3, right after the 3-byte prefix)
    cfg = cfg_of(bytes.fromhex("6003565b00"))
    assert sorted(cfg.blocks) == [0, 3]
    assert [s.entry_pc for s in cfg.entry.successors] == [3]


def test_jump_to_non_jumpdest_has_no_successor():
    cfg = cfg_of(bytes.fromhex("6004565b00"))  # byte 4 is STOP, not a JUMPDEST
    assert cfg.entry.successors == []
    assert len(cfg) == 1


def test_straight_line_clone_zero():
    a = Asm().push(1).push(2).op("ADD", "POP").push(0x40).op("MLOAD", "STOP")
    cfg = cfg_of(a)
    assert len(cfg) == 1 and all(p.clone == 0 for p in cfg.program_points())


def test_running2_has_three_clones_of_allocator():
    cfg = cfg_of(running2().code)
    labels = [n.label for n in cfg.clones_of(0x175)]
    assert labels == ["0x175", "0x175_0", "0x175_1"]


def test_identical_contexts_share_a_clone():
    a = Asm()
    a.push(0).op("CALLDATALOAD").jumpi("other")
    a.push_label("ret").jump("f")
    a.jumpdest("other").push_label("ret").jump("f")
    a.jumpdest("f").op("JUMP")
    a.jumpdest("ret").op("STOP")
    cfg = cfg_of(a)
    assert len(cfg.clones_of(a.labels["f"])) == 1
    assert len(cfg.clones_of(a.labels["ret"])) == 1


def test_distinct_return_addresses_clone():
    a = Asm()
    a.push_label("r1").jump("f")
    a.jumpdest("r1").push_label("r2").jump("f")
    a.jumpdest("r2").op("STOP")
    a.jumpdest("f").op("JUMP")
    cfg = cfg_of(a)
    f = a.labels["f"]
    assert [n.label for n in cfg.clones_of(f)] == [ProgramPoint(f).label, ProgramPoint(f, 1).label]


def test_constant_condition_prunes_jumpi():
    a = Asm().push(1).jumpi("t").op("INVALID")
    a.jumpdest("t").op("STOP")
    cfg = cfg_of(a)
    assert [s.entry_pc for s in cfg.entry.successors] == [a.labels["t"]]
    a = Asm().push(0).jumpi("t").op("STOP")
    a.jumpdest("t").op("STOP")
    cfg = cfg_of(a)
    assert [s.entry_pc for s in cfg.entry.successors] == [6]  # the fall-through STOP


def test_top_and_heights():
    a = Asm().push(1).push(2).op("ADD", "STOP")
    cfg = cfg_of(a)
    assert cfg.top(ProgramPoint(0)) == 0
    assert cfg.top(ProgramPoint(4)) == 2
    with pytest.raises(UnknownProgramPoint):
        cfg.top(ProgramPoint(1))
    with pytest.raises(UnknownProgramPoint):
        cfg.top(ProgramPoint(0, 5))


def test_top_at_third_allocation():
    # two words of context below the fused pair: the pushed 0x40 sits at index 8
    cfg = cfg_of(running2().code)
    assert cfg.top(pp("0x178_1")) == 9
    assert cfg.top(pp("0x176_1")) == 8


def test_fusion_from_constant_tracking():
    a = Asm().push(0x40).push(0).op("SWAP1", "MLOAD")
    a.push(0x40).op("DUP1", "SWAP1", "MSTORE", "STOP")
    cfg = cfg_of(a)
    marks = {p.pc: cfg.instruction(p).fused for p in cfg.program_points()
             if cfg.instruction(p).name in ("MLOAD", "MSTORE")}
    assert list(marks.values()) == [FUSED_MLOAD_FMP, FUSED_MSTORE_FMP]


def test_fusion_is_per_clone():
    # f loads from whatever address the caller pushed
    a = Asm()
    a.push_label("r1").push(0x40).op("SWAP1").jump("f")
    a.jumpdest("r1").push_label("r2").push(0x20).op("SWAP1").jump("f")
    a.jumpdest("r2").op("STOP")
    a.jumpdest("f").op("SWAP1", "MLOAD", "POP", "JUMP")
    cfg = cfg_of(a)
    f = a.labels["f"]
    loads = [p for p in cfg.points_at(f + 2)]
    assert [cfg.instruction(p).fused for p in loads] == [FUSED_MLOAD_FMP, None]
    flat = {i.pc: i for i in cfg.fused_disassembly()}
    assert flat[f + 2].fused is None


def test_unresolved_jump():
    with pytest.raises(UnresolvedJump) as e:
        cfg_of(bytes.fromhex("600035565b00"))
    assert e.value.pc == 3


def test_clone_budget():
    with pytest.raises(CloneBudgetExceeded):
        cfg_of(running2().code, max_clones=2)
    assert len(cfg_of(running2().code, max_clones=3).clones_of(0x175)) == 3


def test_stack_underflow_is_invalid_stack():
    with pytest.raises(InvalidStack):
        cfg_of(b"\x50\x00")


def test_reachable_same_block_and_unconnected():
    a = Asm().push(0).op("CALLDATALOAD").jumpi("b")
    a.op("STOP")
    a.jumpdest("b").op("STOP")
    cfg = cfg_of(a)
    p0, p1 = ProgramPoint(0), ProgramPoint(2)
    assert cfg.reachable(p0, p1)
    assert not cfg.reachable(p1, p0)
    assert not cfg.reachable(p0, p0)
    stop_a, stop_b = ProgramPoint(7), ProgramPoint(a.labels["b"] + 1)
    assert not cfg.reachable(stop_a, stop_b)
    assert not cfg.reachable(stop_b, stop_a)
    assert cfg.reachable(p0, stop_b)


def test_reachable_through_loop():
    a = Asm().push(3)
    a.jumpdest("head").push(1).op("SWAP1", "SUB", "DUP1").jumpi("head")
    a.op("STOP")
    cfg = cfg_of(a)
    body = ProgramPoint(a.labels["head"] + 3)
    assert cfg.reachable(body, body)
    assert not cfg.reachable(ProgramPoint(0), ProgramPoint(0))


def test_dot_export():
    dot = cfg_of(running2().code).to_dot()
    assert dot.startswith("digraph cfg {")
    assert '"0x175_1"' in dot and "->" in dot


@pytest.mark.parametrize("make", [running1, running2, running3])
def test_heights_and_paths_match_execution(make):
    fx = make()
    cfg = cfg_of(fx.code)
    for cd in fx.calldata:
        t = execute(fx.code, cd, fx.stubs, cfg=cfg, storage=fx.storage)
        rep = check_cfg_soundness(t, cfg)
        assert rep.ok, rep.violations
        assert rep.checked == len(t.steps)


@pytest.mark.parametrize("seed", range(40))
def test_heights_and_fusion_on_generated(seed):
    g = generate(seed)
    cfg = cfg_of(g.code)
    for cd in g.calldata:
        rep = check_cfg_soundness(execute(g.code, cd, g.stubs, cfg=cfg), cfg)
        assert rep.ok, rep.violations
