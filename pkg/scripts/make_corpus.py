"""Regenerate corpus/: 50 contracts, with descriptors where calldata is known.

    python3 scripts/make_corpus.py [outdir]

Contents: the hand-assembled fixtures, a one-byte STOP, five bytecodes
lifted from the example sources now in examples/ (compiler output of
various solc versions) and generated programs from evmmem.gen.
"""

import json
import re
import sys
from dataclasses import replace
from pathlib import Path

from evmmem import fixtures
from evmmem.asm import parse_code
from evmmem.driver import AnalysisConfig, analyze_contract
from evmmem.fixtures import Fixture
from evmmem.gen import generate

ROOT = Path(__file__).resolve().parent.parent
GEN_SEEDS = range(5000, 5038)
HEX = re.compile(r"['\"]((?:0x)?[0-9a-fA-F]{200,})['\"]")


def example_bytecodes() -> dict[str, bytes]:
    found: list[tuple[str, str]] = []
    for f in sorted((ROOT / "examples").rglob("*.py")):
        for m in HEX.finditer(f.read_text(errors="replace")):
            if all(m.group(1) != h for _, h in found):
                found.append((f.name.split("__")[0], m.group(1)))
    out = {}
    for i, (src, h) in enumerate(found):
        code = parse_code(h)
        out[f"ex_{src}_{i}"] = code
        # creation code: PUSH2 len DUP1 PUSH2 off PUSH1 0 CODECOPY ... RETURN
        m = re.search(rb"\x61(..)\x80\x61(..)\x60\x00\x39", code, re.S)
        if h.startswith("6060") and m:
            n, off = int.from_bytes(m.group(1), "big"), int.from_bytes(m.group(2), "big")
            out[f"ex_{src}_{i}_runtime"] = code[off:off + n]
    return out


def with_expected(fx: Fixture) -> Fixture:
    """Freeze the analyzer's current answer as the regression expectation."""
    r = analyze_contract(fx.code, AnalysisConfig())
    return replace(fx, expected={"slots": [pts for _, pts in r.slots],
                                 "findings": [f.label for f in r.findings]})


def write(out: Path, name: str, code: bytes, fx: Fixture | None = None) -> None:
    (out / f"{name}.hex").write_text(code.hex() + "\n")
    if fx is not None:
        d = replace(fx, name=name).to_descriptor()
        (out / f"{name}.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for old in list(out.glob("*.hex")) + list(out.glob("*.json")):
        old.unlink()
    fixed = [fixtures.running1(), fixtures.running2(),
             replace(fixtures.running2(read_first=True), name="running2_read_first"),
             replace(fixtures.running2(read_second=True), name="running2_read_second"),
             fixtures.running3(), fixtures.straight_alloc()]
    for fx in fixed:
        write(out, f"fx_{fx.name}", fx.code, with_expected(fx))
    write(out, "fx_stop", b"\x00", Fixture("stop", b"\x00", calldata=[b""]))
    for name, code in example_bytecodes().items():
        write(out, name, code)
    for seed in GEN_SEEDS:
        g = generate(seed)
        fx = Fixture(f"gen_{seed}", g.code, calldata=g.calldata, stubs=g.stubs)
        write(out, f"gen_{seed}", g.code, fx)
    print(len(list(out.glob("*.hex"))), "contracts in", out)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "corpus")
