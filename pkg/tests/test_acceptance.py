"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line; the lines are also repeated in the
pytest terminal summary.  Run directly with `python3 tests/test_acceptance.py`
to get just the verdicts.
"""
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from evmmem.cfg import ProgramPoint, pp
from evmmem.driver import (FAILED, OK, AnalysisConfig, analyze_contract, oracle_check, render,
                           run_corpus)
from evmmem.fixtures import Fixture, running1, running2, running3, straight_alloc
from evmmem.gen import MAX_INSTRUCTIONS, generate
from evmmem.needless import compute_rw_maps
from evmmem.oracle import concrete_slots, execute

ROOT = Path(__file__).resolve().parent.parent

# tolerances, all from the acceptance criteria
RUNNING_EXAMPLE_LIMIT_S = 1.0
MIN_GENERATED = 1000
SOUNDNESS_LIMIT_S = 300.0
ORDERINGS = 10
CORPUS_SIZE = 50
CORPUS_MEDIAN_LIMIT_MS = 2000.0

REFERENCE_SETS = [["0x178"], ["0x178_0"], ["0x178_1"], ["0x114", "0x132", "0x151"], ["0x4D", "0x5A"]]
# the fixture's decoder copies the call result into a fresh struct; the reference
# listing leaves that allocation out
FIXTURE_ONLY_SETS = [["0x84"]]
RUNNING2_FINDINGS = ["0x19A", "0x1AB", "0x1B4", "0x19A_1", "0x1AB_1", "0x1B4_1"]

RESULTS = []


@contextmanager
def criterion(n, title):
    try:
        yield
    except BaseException as e:
        line = f"FAIL AC{n} {title}: {type(e).__name__}: {e}".splitlines()[0]
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS AC{n} {title}"
    RESULTS.append(line)
    print(line)


def artifacts(code, **kw):
    r = analyze_contract(code, AnalysisConfig(**kw), keep_artifacts=True)
    assert r.ok, r.reason
    return r, r.artifacts


def point_sets(sets):
    return {frozenset(pp(x) for x in s) for s in sets}


def test_ac1_running_example():
    with criterion(1, "running example slots and findings"):
        t0 = time.perf_counter()
        r, art = artifacts(running2().code)
        elapsed = time.perf_counter() - t0
        got = art.table.point_sets()
        assert point_sets(REFERENCE_SETS) <= got
        assert got == point_sets(REFERENCE_SETS + FIXTURE_ONLY_SETS)
        assert sorted(f.point.label for f in art.findings) == sorted(RUNNING2_FINDINGS)
        assert len(art.findings) == 6
        middle = {p for n in art.cfg.clones_of(0x175)[1:2] for p in n.instructions}
        assert art.cfg.clones_of(0x175)[1].label == "0x175_0"
        assert not any(f.point in middle for f in art.findings)
        # Running1 carries the transient slot on its own
        _, art1 = artifacts(running1().code)
        assert art1.findings == []
        assert elapsed < RUNNING_EXAMPLE_LIMIT_S, elapsed


def test_ac2_rw_spot_checks():
    with criterion(2, "R/W maps at the call and the first allocation"):
        _, art = artifacts(running2().code)
        maps = compute_rw_maps(art.cfg, art.access_solution, art.table)
        s7 = art.table.id_of([pp("0x114"), pp("0x132"), pp("0x151")])
        s3 = art.table.id_of([pp("0x178")])
        assert art.cfg.instruction(pp("0x139")).name == "STATICCALL"
        assert maps.reads[pp("0x139")] == {s7}
        assert maps.writes[pp("0x139")] == {s7}
        assert maps.reads[pp("0x178")] == {s3}


def test_ac3_loop_abstraction():
    with criterion(3, "loop allocations share one abstract slot"):
        fx = running3()
        _, art = artifacts(fx.code)
        t = art.table
        array, struct, result = (t.id_of([pp(x)]) for x in ("0x5A", "0x16A", "0xD1"))
        for p in art.cfg.points_at(fx.labels["calldone"]):
            assert art.access_solution.pre[p].memory == {array: {struct, result}}
        many = 0
        for cd in fx.calldata:
            trace = execute(fx.code, cd, fx.stubs, cfg=art.cfg, storage=fx.storage)
            loop = [c for c in concrete_slots(trace) if set(c.loading_points) == {pp("0x16A")}]
            many = max(many, len(loop))
            for c in loop:
                assert [s.id for s in t.slots if set(c.loading_points) <= s.points] == [struct]
        assert many == 3


def test_ac4_soundness_suite():
    with criterion(4, f"{MIN_GENERATED} generated programs pass all checkers"):
        t0 = time.perf_counter()
        bad = []
        checked = 0
        for seed in range(MIN_GENERATED):
            g = generate(seed)
            assert g.instructions <= MAX_INSTRUCTIONS
            fx = Fixture(f"gen_{seed}", g.code, calldata=g.calldata, stubs=g.stubs)
            for rep in oracle_check(g.code, fx):
                checked += rep.checked
                bad.extend(f"seed {seed} {rep.name}: {v}" for v in rep.violations)
        elapsed = time.perf_counter() - t0
        assert not bad, bad[:5]
        assert checked > MIN_GENERATED
        assert elapsed < SOUNDNESS_LIMIT_S, elapsed


def _fingerprint(r):
    a = r.artifacts
    sols = []
    for sol in (a.slot_solution, a.access_solution):
        sols.append(repr(sorted(sol.pre.items())) + repr(sorted(sol.post.items())))
    return sols, render(r, "json"), render(r, "text")


def test_ac5_fixpoint_determinism():
    with criterion(5, f"{ORDERINGS} worklist orderings are byte-identical"):
        fixtures = [running1(), running2(), running2(read_first=True), running2(read_second=True),
                    running3(), straight_alloc()]
        for fx in fixtures:
            base = _fingerprint(analyze_contract(fx.code, keep_artifacts=True))
            for seed in range(ORDERINGS):
                r = analyze_contract(fx.code, AnalysisConfig(seed=seed), keep_artifacts=True)
                assert _fingerprint(r) == base, (fx.name, seed)


def _shifted(f, end_pc, extra):
    if f.point.pc < end_pc:
        return f.point
    return ProgramPoint(f.point.pc + 3 * extra, f.point.clone)


def test_ac6_mutation_sensitivity():
    with criterion(6, "an added read removes exactly its findings"):
        _, base = artifacts(running2().code)
        first = {f.point.label for f in base.findings if f.point.clone == 0}
        second = {f.point.label for f in base.findings if f.point.clone == 2}
        variants = [({"read_first": True}, second), ({"read_second": True}, first),
                    ({"read_first": True, "read_second": True}, set())]
        for variant, left in variants:
            _, art = artifacts(running2(**variant).code)
            assert {f.point.label for f in art.findings} == left, variant
        # same property on generated programs: reading pointer `pos` at the exit
        # kills exactly the findings on slots that pointer may hold there
        mutations = 0
        for seed in range(300):
            g = generate(seed)
            _, art = artifacts(g.code)
            if not art.findings:
                continue
            ends = art.cfg.points_at(g.end_pc)
            for pos in g.pointer_positions():
                live = set()
                for e in ends:
                    live |= art.access_solution.pre[e].at(pos)
                want = {(_shifted(f, g.end_pc, 1), f.slot) for f in art.findings
                        if f.point.pc >= g.end_pc or f.slot not in live}
                _, mutated = artifacts(generate(seed, extra_reads=(pos,)).code)
                assert {(f.point, f.slot) for f in mutated.findings} == want, (seed, pos)
                mutations += 1
        assert mutations >= 100


def test_ac7_sample_corpus():
    with criterion(7, f"{CORPUS_SIZE}-contract corpus, median <= 2 s, no crashes"):
        s = run_corpus(ROOT / "corpus")
        assert len(s.reports) == CORPUS_SIZE
        crashed = [r.contract_id for r in s.reports if r.status == FAILED]
        assert not crashed, crashed
        assert sum(r.status == OK for r in s.reports) >= CORPUS_SIZE - 1
        assert s.median_ms() <= CORPUS_MEDIAN_LIMIT_MS, s.median_ms()


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted(globals().items()):
        if name.startswith("test_ac") and callable(fn):
            try:
                fn()
            except BaseException:
                failed += 1
    sys.exit(1 if failed else 0)
