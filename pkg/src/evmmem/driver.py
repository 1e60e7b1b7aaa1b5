"""End-to-end pipeline, corpus runner, report rendering and bytecode fetch."""

from __future__ import annotations

import json
import logging
import os
import re
import statistics
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .access import run_access_analysis
from .asm import disassemble, parse_hex, strip_metadata
from .cfg import Cfg, ProgramPoint, build_cfg
from .errors import AnalysisTimeout, CfgError, Deadline
from .fixpoint import Solution
from .fixtures import Fixture
from .needless import Finding, compute_rw_maps, infer_needless
from .slots import AbstractSlotTable, collect_slots, run_slot_analysis

log = logging.getLogger(__name__)

SCHEMA = 1
OK, CFG_FAILED, TIMEOUT, FAILED = "OK", "CFG_FAILED", "TIMEOUT", "FAILED"
CONTRACT_SUFFIXES = (".hex", ".bin")


@dataclass(frozen=True)
class AnalysisConfig:
    timeout_secs: Optional[float] = 120.0
    max_clones: int = 64
    seed: Optional[int] = None      # worklist order; None is FIFO
    include_timing: bool = False    # timing breaks byte-identical output


@dataclass(frozen=True)
class ReportFinding:
    pc: int
    clone: int
    opcode: str
    slots: tuple[int, ...]
    whole_slot_dead: bool

    @property
    def label(self) -> str:
        return ProgramPoint(self.pc, self.clone).label


@dataclass
class Artifacts:
    cfg: Cfg
    table: AbstractSlotTable
    slot_solution: Solution
    access_solution: Solution
    findings: list[Finding]


@dataclass
class AnalysisReport:
    contract_id: str
    status: str = OK
    reason: str = ""
    slots: list[tuple[int, list[str]]] = field(default_factory=list)
    findings: list[ReportFinding] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    artifacts: Optional[Artifacts] = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == OK

    def to_dict(self, include_timing: bool = False) -> dict:
        stats = dict(self.stats)
        if not include_timing:
            stats.pop("ms", None)
        return {
            "schema": SCHEMA,
            "contract": self.contract_id,
            "status": self.status,
            "reason": self.reason,
            "slots": [{"id": i, "points": pts} for i, pts in self.slots],
            "findings": [
                {"pc": f.pc, "clone": f.clone, "point": f.label, "opcode": f.opcode,
                 "slots": list(f.slots), "whole_slot_dead": f.whole_slot_dead}
                for f in self.findings
            ],
            "stats": stats,
        }


def _group_findings(findings: list[Finding]) -> list[ReportFinding]:
    grouped: dict = {}
    for f in sorted(findings):
        grouped.setdefault(f.point, []).append(f)
    out = []
    for p, fs in grouped.items():
        out.append(ReportFinding(p.pc, p.clone, fs[0].opcode.mnemonic,
                                 tuple(f.slot for f in fs),
                                 all(f.whole_slot_dead for f in fs)))
    return out


def analyze_contract(code: bytes, config: AnalysisConfig = AnalysisConfig(), *,
                     contract_id: str = "", keep_artifacts: bool = False) -> AnalysisReport:
    """Run the whole pipeline; failures come back as a status, never raised."""
    report = AnalysisReport(contract_id)
    t0 = time.perf_counter()
    deadline = Deadline(config.timeout_secs)
    kw = {"seed": config.seed, "deadline": deadline}
    try:
        dis = disassemble(strip_metadata(bytes(code)))
        report.stats["instructions"] = len(dis)
        try:
            cfg = build_cfg(dis, max_clones=config.max_clones, deadline=deadline)
        except CfgError as e:
            raise _CfgFailed(f"{type(e).__name__}: {e}") from e
        report.stats["blocks"] = len(cfg.blocks)
        report.stats["clones"] = len(cfg.order)
        slot_sol = run_slot_analysis(cfg, **kw)
        table = collect_slots(slot_sol, cfg)
        deadline.check_now()
        acc = run_access_analysis(cfg, table, **kw)
        maps = compute_rw_maps(cfg, acc, table)
        deadline.check_now()
        found = infer_needless(maps, cfg)
    except _CfgFailed as e:
        report.status, report.reason = CFG_FAILED, str(e)
    except AnalysisTimeout as e:
        report.status, report.reason = TIMEOUT, str(e)
    except Exception as e:  # crash isolation: any stage failure is a status
        log.debug("analysis of %s failed", contract_id, exc_info=True)
        report.status, report.reason = FAILED, f"{type(e).__name__}: {e}"
    else:
        report.slots = [(s.id, s.labels) for s in table.slots]
        report.findings = _group_findings(found)
        if keep_artifacts:
            report.artifacts = Artifacts(cfg, table, slot_sol, acc, found)
    report.stats["slots"] = len(report.slots)
    report.stats["findings"] = sum(len(f.slots) for f in report.findings)
    report.stats["ms"] = round((time.perf_counter() - t0) * 1000, 3)
    return report


class _CfgFailed(Exception):
    pass


def render(report: AnalysisReport, fmt: str = "json", *, include_timing: bool = False) -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(include_timing), sort_keys=True, indent=2) + "\n").encode()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"contract {report.contract_id or '-'}: {report.status}"
             + (f" ({report.reason})" if report.reason else "")]
    for k in sorted(report.stats):
        if k != "ms" or include_timing:
            lines.append(f"  {k}: {report.stats[k]}")
    if report.slots:
        lines.append("slots:")
        for i, pts in report.slots:
            lines.append(f"  s{i}  {{{', '.join(pts)}}}")
    lines.append(f"needless writes: {report.stats.get('findings', 0)}")
    if report.findings:
        lines.append(f"  {'point':<12}{'opcode':<10}{'slots':<14}whole slot dead")
        for f in report.findings:
            slots = ",".join(f"s{s}" for s in f.slots)
            lines.append(f"  {f.label:<12}{f.opcode:<10}{slots:<14}{'yes' if f.whole_slot_dead else 'no'}")
    return ("\n".join(lines) + "\n").encode()


# expected-result regression and oracle checks

def check_expected(report: AnalysisReport, expected: dict) -> list[str]:
    """Compare a report with a descriptor's `expected` block."""
    problems = []
    if "slots" in expected:
        got = {frozenset(pts) for _, pts in report.slots}
        want = {frozenset(pts) for pts in expected["slots"]}
        if got != want:
            problems.append(f"slots differ: missing {sorted(map(sorted, want - got))}, "
                            f"extra {sorted(map(sorted, got - want))}")
    if "findings" in expected:
        got = sorted(f.label for f in report.findings)
        if got != sorted(expected["findings"]):
            problems.append(f"findings differ: got {got}, want {sorted(expected['findings'])}")
    return problems


def oracle_check(code: bytes, fixture: Fixture, config: AnalysisConfig = AnalysisConfig()) -> list:
    """Execute every calldata variant and run the soundness checkers.

    Returns the merged CheckReports (cfg, slots, accesses, needless).
    """
    from .oracle import (CheckReport, check_access_soundness, check_cfg_soundness,
                         check_needless_soundness, check_slot_soundness, execute)

    report = analyze_contract(code, config, contract_id=fixture.name, keep_artifacts=True)
    if not report.ok:
        raise RuntimeError(f"{fixture.name}: analysis {report.status} {report.reason}")
    art = report.artifacts
    code = strip_metadata(bytes(code))
    merged = {n: CheckReport(n) for n in ("cfg", "slots", "accesses", "needless")}
    traces = []
    for cd in fixture.calldata or [b""]:
        t = execute(code, cd, fixture.stubs, cfg=art.cfg, storage=fixture.storage)
        traces.append(t)
        merged["cfg"].merge(check_cfg_soundness(t, art.cfg))
        merged["slots"].merge(check_slot_soundness(t, art.table))
        merged["accesses"].merge(check_access_soundness(t, art.access_solution, art.table))
    merged["needless"].merge(check_needless_soundness(traces, art.findings, art.table))
    return list(merged.values())


# corpus

@dataclass
class CorpusSummary:
    reports: list[AnalysisReport] = field(default_factory=list)
    oracle: dict[str, list] = field(default_factory=dict)

    @property
    def analyzed(self) -> int:
        return sum(r.ok for r in self.reports)

    @property
    def failed(self) -> int:
        return len(self.reports) - self.analyzed

    def totals(self) -> dict:
        return {
            "contracts": len(self.reports),
            "analyzed": self.analyzed,
            "failed": self.failed,
            "slots": sum(r.stats.get("slots", 0) for r in self.reports),
            "findings": sum(r.stats.get("findings", 0) for r in self.reports),
            "ms": round(sum(r.stats.get("ms", 0) for r in self.reports), 3),
        }

    def median_ms(self) -> float:
        times = [r.stats["ms"] for r in self.reports if "ms" in r.stats]
        return statistics.median(times) if times else 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        totals = self.totals()
        if not include_timing:
            totals.pop("ms")
        out = {
            "schema": SCHEMA,
            "totals": totals,
            "contracts": [r.to_dict(include_timing) for r in self.reports],
        }
        if self.oracle:
            out["oracle"] = {name: {r.name: {"checked": r.checked, "violations": r.violations}
                                    for r in reps}
                             for name, reps in sorted(self.oracle.items())}
        return out


def render_summary(summary: CorpusSummary, fmt: str = "json", *, include_timing: bool = False) -> bytes:
    if fmt == "json":
        return (json.dumps(summary.to_dict(include_timing), sort_keys=True, indent=2) + "\n").encode()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    head = f"{'contract':<32}{'status':<12}{'slots':>6}{'findings':>10}"
    if include_timing:
        head += f"{'ms':>10}"
    lines = [head]
    for r in summary.reports:
        row = f"{r.contract_id:<32}{r.status:<12}{r.stats.get('slots', 0):>6}{r.stats.get('findings', 0):>10}"
        if include_timing:
            row += f"{r.stats.get('ms', 0):>10.1f}"
        lines.append(row)
    t = summary.totals()
    lines.append(f"analyzed {t['analyzed']}, failed {t['failed']}, "
                 f"slots {t['slots']}, findings {t['findings']}"
                 + (f", {t['ms']:.1f} ms" if include_timing else ""))
    for name, reps in sorted(summary.oracle.items()):
        bad = sum(len(r.violations) for r in reps)
        lines.append(f"oracle {name}: " + ", ".join(f"{r.name} {r.checked}" for r in reps)
                     + f" checked, {bad} violations")
    return ("\n".join(lines) + "\n").encode()


def read_contract(path: Path) -> bytes:
    data = path.read_bytes()
    if path.suffix == ".hex":
        return parse_hex(data.decode("ascii"))
    return data


def _analyze_file(path: str, config: AnalysisConfig) -> AnalysisReport:
    p = Path(path)
    try:
        code = read_contract(p)
    except (ValueError, UnicodeDecodeError, OSError) as e:
        r = AnalysisReport(p.name, FAILED, f"unreadable: {e}")
        r.stats.update(slots=0, findings=0)
        return r
    return analyze_contract(code, config, contract_id=p.name)


def corpus_files(path: Path) -> list[Path]:
    return sorted((p for p in Path(path).iterdir() if p.suffix in CONTRACT_SUFFIXES and p.is_file()),
                  key=lambda p: p.name)


def load_descriptor(contract: Path) -> Optional[Fixture]:
    side = contract.with_suffix(".json")
    if not side.exists():
        return None
    return Fixture.from_descriptor(json.loads(side.read_text()))


def run_corpus(path, config: AnalysisConfig = AnalysisConfig(), *, jobs: int = 1,
               oracle: bool = False) -> CorpusSummary:
    """Analyze every .hex/.bin file under `path`, in filename order.

    With jobs > 1 contracts run in worker processes; results are still
    merged in filename order so output does not depend on scheduling.
    """
    files = corpus_files(Path(path))
    summary = CorpusSummary()
    if jobs > 1 and len(files) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            summary.reports = list(ex.map(_analyze_file, [str(f) for f in files],
                                          [config] * len(files)))
    else:
        summary.reports = [_analyze_file(str(f), config) for f in files]
    if oracle:
        for f, r in zip(files, summary.reports):
            fx = load_descriptor(f)
            if fx is None or not r.ok:
                continue
            summary.oracle[f.name] = oracle_check(read_contract(f), fx, config)
            if fx.expected:
                problems = check_expected(r, fx.expected)
                if problems:
                    from .oracle import CheckReport
                    summary.oracle[f.name].append(CheckReport("expected", 1, problems))
    return summary


# bytecode retrieval

class FetchError(Exception):
    pass


class NetworkError(FetchError):
    pass


class NotAContract(FetchError):
    pass


class RateLimited(FetchError):
    def __init__(self, retry_after: float):
        super().__init__(f"rate limited, retry after {retry_after}s")
        self.retry_after = retry_after


API_KEY_ENV = "EVMMEM_API_KEY"
_ADDRESS = re.compile(r"0x[0-9a-fA-F]{40}")


@dataclass
class Endpoint:
    """Where to get code from.

    style "rpc" POSTs eth_getCode to a JSON-RPC node; "explorer" issues the
    GET form used by explorer proxy APIs (module=proxy&action=eth_getCode).
    """
    url: str
    style: str = "explorer"
    api_key: Optional[str] = None   # falls back to $EVMMEM_API_KEY
    cache_dir: Optional[Path] = None
    timeout: float = 30.0
    retries: int = 3
    max_wait: float = 60.0


def _retry_after(value: Optional[str], default: float = 1.0) -> float:
    if not value:
        return default
    try:
        return max(0.0, float(value))
    except ValueError:
        return default


def _request(ep: Endpoint, address: str) -> urllib.request.Request:
    key = ep.api_key or os.environ.get(API_KEY_ENV)
    if ep.style == "rpc":
        body = json.dumps({"jsonrpc": "2.0", "id": 1, "method": "eth_getCode",
                           "params": [address, "latest"]}).encode()
        return urllib.request.Request(ep.url, body, {"Content-Type": "application/json"})
    if ep.style != "explorer":
        raise ValueError(f"unknown endpoint style {ep.style!r}")
    q = {"module": "proxy", "action": "eth_getCode", "address": address, "tag": "latest"}
    if key:
        q["apikey"] = key
    sep = "&" if "?" in ep.url else "?"
    return urllib.request.Request(ep.url + sep + urllib.parse.urlencode(q))


def _fetch_once(ep: Endpoint, address: str) -> str:
    try:
        with urllib.request.urlopen(_request(ep, address), timeout=ep.timeout) as resp:
            payload = json.loads(resp.read().decode())
    except urllib.error.HTTPError as e:
        if e.code == 429:
            raise RateLimited(_retry_after(e.headers.get("Retry-After"))) from e
        raise NetworkError(f"HTTP {e.code}") from e
    except (urllib.error.URLError, OSError) as e:
        raise NetworkError(str(e)) from e
    except ValueError as e:
        raise NetworkError(f"bad JSON: {e}") from e
    if not isinstance(payload, dict):
        raise NetworkError("unexpected response")
    if "error" in payload:
        raise NetworkError(f"node error: {payload['error']}")
    result = payload.get("result")
    if payload.get("status") == "0" or not isinstance(result, str) or not result.startswith("0x"):
        # explorers report throttling in-band with HTTP 200
        if isinstance(result, str) and "rate limit" in result.lower():
            raise RateLimited(1.0)
        raise NetworkError(f"unexpected result: {str(result)[:80]}")
    return result


def fetch_bytecode(address: str, endpoint: Endpoint, *,
                   sleep: Callable[[float], None] = time.sleep) -> bytes:
    """Runtime code of `address`, from the disk cache when present."""
    if not _ADDRESS.fullmatch(address):
        raise ValueError(f"not a 20-byte hex address: {address!r}")
    address = address.lower()
    cached = endpoint.cache_dir / f"{address}.hex" if endpoint.cache_dir else None
    if cached is not None and cached.exists():
        code = parse_hex(cached.read_text())
        if not code:
            raise NotAContract(address)
        return code
    attempt = 0
    while True:
        try:
            result = _fetch_once(endpoint, address)
            break
        except RateLimited as e:
            attempt += 1
            if attempt > endpoint.retries or e.retry_after > endpoint.max_wait:
                raise
            sleep(e.retry_after)
    try:
        code = parse_hex(result)
    except ValueError as e:
        raise NetworkError(f"bad code hex: {e}") from e
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        cached.write_text(result + "\n")
    if not code:
        raise NotAContract(address)
    return code
