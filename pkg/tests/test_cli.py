import json
import subprocess
import sys

import pytest

from memdos.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, OUT_ENV, build_parser, main

SCENARIO = """
name = "cli-unit"
seed = 2
duration_ms = 5000

[defense]
start_ms = 500

[[vm]]
id = "victim"
role = "protected"
[vm.workload]
kind = "phased"
footprint = "32KB"
think = 60

[[vm]]
id = "attacker"
role = "attacker"
start_ms = 1000
[vm.workload]
kind = "atomic_lock"
atomic = "unaligned"
"""


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "cli.toml"
    path.write_text(SCENARIO)
    return path


def test_run_writes_report_and_trace(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(scenario), "--seed", "4", "--out", str(out), "--trace"]) == EXIT_OK
    report = json.loads((out / "cli-unit-seed4.report.json").read_text())
    assert report["seed"] == 4 and set(report["vms"]) == {"victim", "attacker"}
    assert (out / "cli-unit-seed4.trace.jsonl").exists()
    assert "victim" in capsys.readouterr().out


def test_report_replays_trace(scenario, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(scenario), "--out", str(out), "--trace"])
    capsys.readouterr()
    assert main(["report", str(out / "cli-unit-seed2.trace.jsonl")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["replay_mismatches"] == 0 and summary["replayed_ks"] > 0


def test_report_flags_tampered_trace(scenario, tmp_path):
    out = tmp_path / "out"
    main(["run", str(scenario), "--out", str(out), "--trace"])
    path = out / "cli-unit-seed2.trace.jsonl"
    lines = path.read_text().splitlines()
    for i, line in enumerate(lines):
        rec = json.loads(line)
        if rec["kind"] == "ks_decision":
            rec["payload"]["D"] = -1.0
            lines[i] = json.dumps(rec)
            break
    path.write_text("\n".join(lines) + "\n")
    assert main(["report", str(path)]) == EXIT_RUNTIME


def test_sweep_uses_env_out_dir(scenario, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env-out"))
    assert main(["sweep", str(scenario), "--seeds", "1..2"]) == EXIT_OK
    result = json.loads((tmp_path / "env-out" / "cli-unit-sweep.json").read_text())
    assert result["seeds"] == [1, 2]
    assert "tp_rate" in capsys.readouterr().out


@pytest.mark.parametrize("text,seeds", [("3..5", [3, 4, 5]), ("1,4,9", [1, 4, 9]), ("7", [7])])
def test_seed_lists(text, seeds):
    args = build_parser().parse_args(["sweep", "x.toml", "--seeds", text])
    assert args.seeds == seeds


def test_config_errors(tmp_path):
    assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.toml"
    bad.write_text('[[vm]]\nid = "a"\n[[vm]]\nid = "a"\n')
    assert main(["run", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["explode"])
    assert exc.value.code == 2


def test_module_entry_point(scenario, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "memdos.cli", "run", str(scenario), "--out",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert "report:" in proc.stdout
