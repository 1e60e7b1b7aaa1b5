import json
import subprocess
import sys

import pytest

from evmmem.cli import EXIT_FAILED, EXIT_OK, EXIT_UNSOUND, EXIT_USAGE, main
from evmmem.fixtures import running2, running3


@pytest.fixture
def r2_files(tmp_path):
    fx = running2()
    (tmp_path / "r2.hex").write_text(fx.code.hex())
    (tmp_path / "r2.json").write_text(json.dumps(fx.to_descriptor()))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_analyze_json(capsys, r2_files):
    code, out, _ = run(capsys, "analyze", r2_files / "r2.hex", "--format", "json")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["schema"] == 1 and doc["status"] == "OK"
    assert len(doc["findings"]) == 6


def test_analyze_text_default(capsys, r2_files):
    code, out, _ = run(capsys, "analyze", r2_files / "r2.hex")
    assert code == EXIT_OK
    assert "needless writes: 6" in out
    assert " ms:" not in out
    _, timed, _ = run(capsys, "analyze", r2_files / "r2.hex", "--timing")
    assert "  ms:" in timed


def test_analyze_descriptor_and_oracle(capsys, r2_files):
    code, out, _ = run(capsys, "analyze", r2_files / "r2.json", "--oracle-check")
    assert code == EXIT_OK
    assert "oracle running2 needless:" in out and "0 violations" in out
    code, _, _ = run(capsys, "analyze", r2_files / "r2.hex", "--oracle-check")
    assert code == EXIT_OK  # picks up the sibling descriptor


def test_expected_mismatch_exits_3(capsys, r2_files):
    d = json.loads((r2_files / "r2.json").read_text())
    d["expected"] = {"findings": ["0x19A"]}
    (r2_files / "bad.json").write_text(json.dumps(d))
    code, out, _ = run(capsys, "analyze", r2_files / "bad.json", "--oracle-check")
    assert code == EXIT_UNSOUND
    assert "expected mismatch" in out


def test_dot_export(capsys, r2_files, tmp_path):
    dot = tmp_path / "cfg.dot"
    code, _, _ = run(capsys, "analyze", r2_files / "r2.hex", "--dot", dot)
    assert code == EXIT_OK
    assert dot.read_text().startswith("digraph cfg {")


def test_cfg_failure_exits_2(capsys, tmp_path):
    (tmp_path / "j.hex").write_text("600035565b00")
    code, out, _ = run(capsys, "analyze", tmp_path / "j.hex", "--format", "json")
    assert code == EXIT_FAILED
    assert json.loads(out)["status"] == "CFG_FAILED"
    code, _, _ = run(capsys, "analyze", tmp_path / "j.hex", "--max-clones", "1")
    assert code == EXIT_FAILED


def test_usage_errors_exit_1(capsys, tmp_path):
    for argv in ([], ["frobnicate"], ["analyze"], ["analyze", tmp_path / "missing.hex"],
                 ["analyze", "x.hex", "--format", "xml"], ["corpus", tmp_path / "nope"],
                 ["corpus", tmp_path, "--jobs", "0"],
                 ["fetch", "0x12", "--endpoint", "http://127.0.0.1:9/"], ["fetch", "0x" + "0" * 40]):
        with pytest.raises(SystemExit) as e:
            main([str(a) for a in argv])
        assert e.value.code == EXIT_USAGE, argv
    (tmp_path / "plain.hex").write_text("00")
    with pytest.raises(SystemExit) as e:
        main(["analyze", str(tmp_path / "plain.hex"), "--oracle-check"])
    assert e.value.code == EXIT_USAGE


def test_corpus(capsys, tmp_path):
    for fx in (running2(), running3()):
        (tmp_path / f"{fx.name}.hex").write_text(fx.code.hex())
    code, out, _ = run(capsys, "corpus", tmp_path, "--format", "json", "--jobs", "2")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["totals"]["analyzed"] == 2
    (tmp_path / "z.hex").write_text("600035565b00")
    code, out, _ = run(capsys, "corpus", tmp_path)
    assert code == EXIT_FAILED
    assert "failed 1" in out


def test_fetch_from_cache(capsys, tmp_path):
    addr = "0x00000000000000000000000000000000000000c0"
    (tmp_path / f"{addr}.hex").write_text("0x6001")
    code, out, _ = run(capsys, "fetch", addr, "--endpoint", "http://127.0.0.1:9/", "--cache-dir", tmp_path)
    assert code == EXIT_OK and out == "6001\n"
    dest = tmp_path / "out.hex"
    run(capsys, "fetch", addr, "--endpoint", "http://127.0.0.1:9/", "--cache-dir", tmp_path, "-o", dest)
    assert dest.read_text() == "6001\n"


def test_fetch_failure_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "fetch", "0x" + "1" * 40, "--endpoint", "http://127.0.0.1:9/",
                       "--cache-dir", tmp_path)
    assert code == EXIT_FAILED
    assert "NetworkError" in err


def test_console_entry_point(r2_files):
    p = subprocess.run([sys.executable, "-m", "evmmem.cli", "analyze", str(r2_files / "r2.hex"),
                        "--format", "json"], capture_output=True)
    assert p.returncode == 0
    assert len(json.loads(p.stdout)["findings"]) == 6
    p = subprocess.run([sys.executable, "-m", "evmmem.cli"], capture_output=True)
    assert p.returncode == 1
