"""Command-line interface: subcommands, exit codes, report files."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from dyncfi.cli import main

SPEC_JSON = {
    "modules": [
        {"path": "app", "code_size": 256,
         "symbols": [{"name": "main", "value": "0x1000", "size": 64}],
         "imports": ["foo"], "plt": ["foo"],
         "instruction_offsets": ["0x1004", "0x1008"]},
        {"path": "libfoo.so", "code_size": 512,
         "symbols": [
             {"name": "foo", "value": "0x1000", "size": 48},
             {"name": "bar", "value": "0x1040", "size": 32},
             {"name": "helper", "value": "0x1080", "size": 24,
              "binding": "local", "exported": False}],
         "instruction_offsets": ["0x1004", "0x1044", "0x1084"]},
    ]
}

TRACE = """\
{"seq":1,"tid":0,"kind":"load","path":"app","base":"0x8048000"}
{"seq":2,"tid":0,"kind":"load","path":"libfoo.so","base":"0x40000000"}
{"seq":3,"tid":0,"kind":"indirect-call","src":"0x8049004","dst":"0x40001000","len":5}
{"seq":4,"tid":0,"kind":"indirect-call","src":"0x40001004","dst":"0x40001080","len":5}
{"seq":5,"tid":0,"kind":"return","src":"0x40001084","dst":"0x40001009"}
{"seq":6,"tid":0,"kind":"return","src":"0x40001008","dst":"0x8049009"}
"""


@pytest.fixture()
def workspace(tmp_path: Path) -> Path:
    spec_file = tmp_path / "spec.json"
    spec_file.write_text(json.dumps(SPEC_JSON))
    assert main(["fixture", "--spec", str(spec_file),
                 "-o", str(tmp_path / "mods")]) == 0
    (tmp_path / "trace.jsonl").write_text(TRACE)
    return tmp_path


def run_check(ws: Path, trace: str, *extra: str) -> int:
    return main(["check", "--trace", str(ws / trace),
                 "--sidecar", str(ws / "mods" / "boundaries.sidecar"),
                 "--module-root", str(ws / "mods"),
                 "-o", str(ws / "report.json"), *extra])


def test_fixture_command_emits_parseable_modules(workspace: Path):
    mods = workspace / "mods"
    assert (mods / "app").exists()
    assert (mods / "libfoo.so").exists()
    assert (mods / "boundaries.sidecar").exists()
    assert main(["analyze", str(mods / "libfoo.so")]) == 0


def test_analyze_reports_locals_and_stripped(workspace: Path, capsys):
    mods = workspace / "mods"
    assert main(["analyze", str(mods / "libfoo.so")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["stripped"] is False
    assert doc["locals"] == ["helper"]
    assert doc["exports"] == ["foo", "bar"]


def test_analyze_missing_path_exits_2(capsys):
    assert main(["analyze", "/no/such/file.so"]) == 2
    assert "error:" in capsys.readouterr().err


def test_check_clean_trace_exit_0(workspace: Path):
    assert run_check(workspace, "trace.jsonl") == 0
    doc = json.loads((workspace / "report.json").read_text())
    assert set(doc) == {"summary", "violations", "dair", "epochs"}
    assert doc["summary"]["outcome"]["clean"] is True


def test_check_adversarial_trace_exit_1(workspace: Path):
    assert main(["mutate", "--trace", str(workspace / "trace.jsonl"),
                 "--class", "ret",
                 "--sidecar", str(workspace / "mods" / "boundaries.sidecar"),
                 "--module-root", str(workspace / "mods"),
                 "-o", str(workspace / "bad.jsonl")]) == 0
    assert run_check(workspace, "bad.jsonl") == 1
    doc = json.loads((workspace / "report.json").read_text())
    assert doc["violations"][0]["rule"] == "return-shadow-match"


def test_check_truncated_trace_exit_2(workspace: Path):
    (workspace / "broken.jsonl").write_text(TRACE[: len(TRACE) // 2])
    assert run_check(workspace, "broken.jsonl") == 2


def test_check_missing_trace_exit_2(workspace: Path, capsys):
    assert run_check(workspace, "nope.jsonl") == 2
    assert "error:" in capsys.readouterr().err


def test_check_abort_flag(workspace: Path):
    assert main(["mutate", "--trace", str(workspace / "trace.jsonl"),
                 "--class", "call",
                 "--sidecar", str(workspace / "mods" / "boundaries.sidecar"),
                 "--module-root", str(workspace / "mods"),
                 "-o", str(workspace / "bad2.jsonl")]) == 0
    assert run_check(workspace, "bad2.jsonl", "--abort") == 1
    doc = json.loads((workspace / "report.json").read_text())
    assert doc["summary"]["outcome"]["aborted_at"] is not None


def test_dair_command_writes_report_and_csv(workspace: Path, capsys):
    assert main(["dair", "--trace", str(workspace / "trace.jsonl"),
                 "--sidecar", str(workspace / "mods" / "boundaries.sidecar"),
                 "--module-root", str(workspace / "mods"),
                 "--csv", str(workspace / "series.csv"),
                 "-o", str(workspace / "dair.json")]) == 0
    out = capsys.readouterr().out
    assert "DAIR total" in out
    doc = json.loads((workspace / "dair.json").read_text())
    assert doc["dair"]["n"] == 4
    # hand-computed from the known composition: S = exec bytes =
    # app(text 0x100 + plt 0x10) + lib(text 0x200) = 0x310; the exe call
    # may reach {main, foo} (|T|=2), the lib-internal call {foo, bar,
    # helper} (|T|=3), each return exactly 1.
    s = 0x310
    expected = ((1 - 2 / s) + (1 - 3 / s) + (1 - 1 / s) + (1 - 1 / s)) / 4
    assert doc["dair"]["total"] == pytest.approx(expected, abs=1e-12)
    csv_lines = (workspace / "series.csv").read_text().splitlines()
    assert csv_lines[0] == "seq,dair_total,dair_call,dair_jump,dair_ret"
    assert len(csv_lines) == 1 + 4


def test_check_dump_image_snapshot(workspace: Path):
    assert main(["check", "--trace", str(workspace / "trace.jsonl"),
                 "--sidecar", str(workspace / "mods" / "boundaries.sidecar"),
                 "--module-root", str(workspace / "mods"),
                 "--dump-image", str(workspace / "image.json"),
                 "-o", str(workspace / "report.json")]) == 0
    snap = json.loads((workspace / "image.json").read_text())
    assert {"epoch", "modules", "callback_set", "plt_resolutions",
            "table_targets"} <= set(snap)
    assert [m["path"] for m in snap["modules"]] == ["app", "libfoo.so"]
    assert snap["modules"][0]["imports"] == {"foo": snap["modules"][1]["module_id"]}


def test_dair_stripped_twin_ordering(workspace: Path, capsys):
    assert main(["dair", "--trace", str(workspace / "trace.jsonl"),
                 "--sidecar", str(workspace / "mods" / "boundaries.sidecar"),
                 "--module-root", str(workspace / "mods"),
                 "--stripped-twin",
                 "-o", str(workspace / "dair.json")]) == 0
    out = capsys.readouterr().out
    assert "full >= stripped" in out
    doc = json.loads((workspace / "dair.json").read_text())
    assert doc["dair"]["total"] >= doc["stripped_twin"]["total"]


def test_dair_empty_trace_notice_exit_0(workspace: Path, capsys):
    (workspace / "empty.jsonl").write_text("")
    assert main(["dair", "--trace", str(workspace / "empty.jsonl"),
                 "--module-root", str(workspace / "mods"),
                 "-o", str(workspace / "dair.json")]) == 0
    assert "no indirect transfers" in capsys.readouterr().out


def test_allowlist_flag(workspace: Path):
    # exe calling non-imported 'bar' is a violation without the allowlist
    bad = TRACE + '{"seq":7,"tid":0,"kind":"indirect-call","src":"0x8049004","dst":"0x40001040","len":5}\n'
    (workspace / "t2.jsonl").write_text(bad)
    assert run_check(workspace, "t2.jsonl") == 1
    (workspace / "allow.txt").write_text("app bar\n")
    assert run_check(workspace, "t2.jsonl",
                     "--allowlist", str(workspace / "allow.txt")) == 0


def test_mutate_without_eligible_event_exit_2(workspace: Path):
    (workspace / "loads.jsonl").write_text(TRACE.splitlines()[0] + "\n")
    assert main(["mutate", "--trace", str(workspace / "loads.jsonl"),
                 "--class", "ret",
                 "--module-root", str(workspace / "mods"),
                 "-o", str(workspace / "x.jsonl")]) == 2


def test_fixture_accepts_single_module_spec(tmp_path: Path):
    single = dict(SPEC_JSON["modules"][1])
    (tmp_path / "one.json").write_text(json.dumps(single))
    assert main(["fixture", "--spec", str(tmp_path / "one.json"),
                 "-o", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "libfoo.so").exists()
    assert (tmp_path / "out" / "boundaries.sidecar").exists()


def test_fixture_rejects_bad_json(tmp_path: Path, capsys):
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["fixture", "--spec", str(tmp_path / "bad.json"),
                 "-o", str(tmp_path / "out")]) == 2


def test_console_entry_point_subprocess(workspace: Path):
    env = {"PYTHONPATH": str(Path(__file__).resolve().parent.parent / "src"),
           "LOCKDOWN_LOG": "info", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run(
        [sys.executable, "-m", "dyncfi", "analyze",
         str(workspace / "mods" / "app")],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["imports"] == ["foo"]
