import pytest

from evmmem.asm import disassemble
from evmmem.builder import Asm
from evmmem.cfg import ProgramPoint, build_cfg, pp
from evmmem.fixtures import CallStub, running1, running2, running3, straight_alloc, word
from evmmem.oracle import (AssumptionViolation, ConcreteSlot, OracleStackUnderflow, Trace,
                           abstraction_of, check_access_soundness,
                           check_needless_soundness, check_slot_soundness, concrete_slots, execute)
from evmmem.slots import AbstractSlotTable

from conftest import analyze


def reservation():
    return bytes.fromhex("5b6040518060600160405200")


def traces(fx, cfg):
    return [execute(fx.code, cd, fx.stubs, cfg=cfg, storage=fx.storage) for cd in fx.calldata]


def test_uninitialised_free_pointer_load():
    t = execute(bytes.fromhex("60405100"))
    assert len(t) == 3
    assert t.steps[1].op == "MLOAD" and t.steps[1].stack_after == (0,)
    assert t.halt == "STOP"


def test_reservation_bumps_pointer():
    t = execute(reservation(), initial_freeptr=0x80)
    (store,) = [s for s in t.steps if s.pc == 10]
    assert store.op == "MSTORE"
    assert store.freeptr == 0xE0
    assert int.from_bytes(t.final.memory[0x40:0x60], "big") == 0xE0
    (one,) = concrete_slots(t)
    assert one == ConcreteSlot(0x80, (ProgramPoint(3),))


def test_freeptr_is_non_decreasing():
    for fx in (running1(), running2(), running3(), straight_alloc()):
        for t in traces(fx, None):
            seen = [s.freeptr for s in t.steps if s.freeptr is not None]
            assert seen == sorted(seen)
    back = Asm().push(0x80).push(0x40).op("MSTORE").push(0x60).push(0x40).op("MSTORE", "STOP")
    with pytest.raises(AssumptionViolation):
        execute(back.build())
    assert execute(back.build(), strict=False).halt == "STOP"


def test_errors_and_budget():
    with pytest.raises(OracleStackUnderflow):
        execute(b"\x01")
    with pytest.raises(ValueError):
        execute(b"\x00", max_steps=0)
    spin = Asm().jumpdest("top").jump("top")
    t = execute(spin.build(), max_steps=25)
    assert t.budget_exhausted and len(t) == 25


def test_stubbed_call_return_data():
    a = Asm().push(0x20).push(0).push(0).push(0).push(0xAA).op("GAS", "STATICCALL")
    a.op("RETURNDATASIZE").push(0).push(0).op("RETURNDATACOPY")
    a.push(0).op("MLOAD", "STOP")
    t = execute(a.build(), external_model={0xAA: CallStub(word(7))})
    assert t.steps[-2].stack_after[-1] == 7
    assert t.steps[6].stack_after[-1] == 1
    t = execute(a.build())
    assert t.steps[6].stack_after[-1] == 0


def test_no_fused_load_no_slots():
    assert concrete_slots(execute(bytes.fromhex("6001600052600051"))) == []
    assert concrete_slots(Trace()) == []


def test_running2_call_slot_loaded_three_times():
    fx = running2()
    cfg = build_cfg(disassemble(fx.code))
    slots = [c for t in traces(fx, cfg) for c in concrete_slots(t)]
    want = {pp("0x114"), pp("0x132"), pp("0x151")}
    hits = [c for c in slots if set(c.loading_points) & want]
    assert hits
    for c in hits:
        assert abstraction_of(c) == frozenset(want)
        assert len(c.loading_points) == 3


def test_loop_allocation_shares_a_pc():
    a = Asm().push(0x80).push(0x40).op("MSTORE").push(2)
    a.jumpdest("head").push(0x40).op("MLOAD", "DUP1").push(0x20).op("ADD").push(0x40).op("MSTORE", "POP")
    a.push(1).op("SWAP1", "SUB", "DUP1").jumpi("head")
    a.op("STOP")
    t = execute(a.build())
    slots = concrete_slots(t)
    assert [c.baseref for c in slots] == [0x80, 0xA0]
    assert slots[0].loading_points == slots[1].loading_points
    assert slots[0].loading_points[0].pc == a.labels["head"] + 3


def test_abstraction_deduplicates():
    p, q = pp("0x114"), pp("0x132")
    assert abstraction_of(ConcreteSlot(0x80, (p, q, pp("0x151")))) == {p, q, pp("0x151")}
    assert abstraction_of(ConcreteSlot(0x80, ())) == frozenset()
    assert abstraction_of(ConcreteSlot(0x80, (p, p))) == {p}


@pytest.mark.parametrize("make", [running1, running2, running3, straight_alloc])
def test_checkers_pass_on_fixtures(make):
    fx = make()
    art = analyze(fx.code)
    ts = traces(fx, art.cfg)
    total = 0
    for t in ts:
        for rep in (check_slot_soundness(t, art.table),
                    check_access_soundness(t, art.access_solution, art.table)):
            assert rep.ok, rep.violations
            total += rep.checked
    rep = check_needless_soundness(ts, art.findings, art.table)
    assert rep.ok, rep.violations
    assert total > 0


def test_corrupted_table_is_caught(r2):
    fx, art = r2
    ts = traces(fx, art.cfg)
    dropped = [pp("0x114"), pp("0x132"), pp("0x151")]
    sets = [s.points - {dropped[1]} if s.points == frozenset(dropped) else s.points
            for s in art.table.slots]
    bad = AbstractSlotTable.from_sets(sets)
    assert sum(len(check_slot_soundness(t, bad).violations) for t in ts) >= 1


def test_corrupted_solution_is_caught(r2):
    fx, art = r2
    ts = traces(fx, art.cfg)
    sol = art.access_solution
    saved = dict(sol.pre)
    try:
        sol.pre[pp("0x139")] = type(saved[pp("0x139")])()
        assert sum(len(check_access_soundness(t, sol, art.table).violations) for t in ts) >= 1
    finally:
        sol.pre.clear()
        sol.pre.update(saved)


def test_bogus_finding_is_caught(r2):
    from evmmem.needless import Finding
    fx, art = r2
    ts = traces(fx, art.cfg)
    s7 = art.table.id_of([pp("0x114"), pp("0x132"), pp("0x151")])
    call = pp("0x139")
    bogus = Finding(call, s7, art.cfg.instruction(call).op, False)
    assert sum(len(check_needless_soundness([t], [bogus], art.table).violations) for t in ts) >= 1


def test_empty_trace_is_vacuous(r2):
    _, art = r2
    for rep in (check_slot_soundness(Trace(), art.table),
                check_access_soundness(Trace(), art.access_solution, art.table),
                check_needless_soundness([Trace()], art.findings, art.table)):
        assert rep.ok and rep.checked == 0


def test_determinism():
    fx = running3()
    cfg = build_cfg(disassemble(fx.code))
    for cd in fx.calldata:
        a = execute(fx.code, cd, fx.stubs, cfg=cfg, storage=fx.storage)
        b = execute(fx.code, cd, fx.stubs, cfg=cfg, storage=fx.storage)
        assert a.steps == b.steps and a.returndata == b.returndata
