from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from bmdaudit import __version__
from bmdaudit.cli import main

GOLDEN = Path(__file__).parent / "golden"


def run(args, out, capsys, stdin=None, monkeypatch=None):
    if stdin is not None:
        import io
        monkeypatch.setattr(sys, "stdin", io.StringIO(stdin))
    code = main([*args, "--out", str(out)])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestTables:
    @pytest.mark.parametrize("cmd,name", [("table-detection", "table_detection"), ("table-margin", "table_margin")])
    def test_golden(self, tmp_path, capsys, cmd, name):
        code, stdout, _ = run([cmd], tmp_path, capsys)
        golden = (GOLDEN / f"{name}.csv").read_bytes()
        assert code == 0
        assert (tmp_path / f"{name}.csv").read_bytes() == golden
        assert stdout.encode() == golden

    def test_custom_grid(self, tmp_path, capsys):
        code, stdout, _ = run(["table-detection", "--p", "0.02", "--n", "100"], tmp_path, capsys)
        assert code == 0 and stdout.splitlines()[1] == "0.02,100,86.74"

    def test_json_format(self, tmp_path, capsys):
        code, stdout, _ = run(["table-margin", "--format", "json", "--detect", "0.1", "--sizes", "9000"],
                              tmp_path, capsys)
        rec = json.loads(stdout)[0]
        assert code == 0 and round(rec["margin_delta_percent"], 3) == 3.556

    def test_half_given_grid_is_rejected(self, tmp_path, capsys):
        code, _, err = run(["table-detection", "--p", "0.1"], tmp_path, capsys)
        assert code == 2 and "together" in err


class TestManifest:
    def test_contents(self, tmp_path, capsys):
        run(["table-detection"], tmp_path, capsys)
        m = manifest(tmp_path)
        assert m["tool"] == "bmdaudit" and m["tool_version"] == __version__
        assert m["command"] == "table-detection"
        assert [o["path"] for o in m["outputs"]] == ["table_detection.csv"]
        assert "timestamp" not in json.dumps(m)

    def test_env_out(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("BMDAUDIT_OUT", str(tmp_path / "env"))
        assert main(["staffing", "--total-audits", "500", "--shares", "0.63", "0.29", "0.08",
                     "--early-locations", "52", "--early-days", "14", "--teams", "52"]) == 0
        assert "per_early_location,6.06" in capsys.readouterr().out
        assert (tmp_path / "env" / "manifest.json").exists()


class TestOracle:
    def test_published_case(self, tmp_path, capsys):
        code, stdout, _ = run(["oracle", "2800", "14", "0.05"], tmp_path, capsys)
        assert code == 0
        assert "min_audits,539" in stdout
        assert "with_replacement_detection_percent,93.29" in stdout

    def test_unreachable(self, tmp_path, capsys):
        code, _, err = run(["oracle", "2800", "0", "0.05"], tmp_path, capsys)
        assert code == 2 and "unreachable risk limit" in err

    def test_bad_parameters(self, tmp_path, capsys):
        code, _, _ = run(["oracle", "10", "20", "0.05"], tmp_path, capsys)
        assert code == 2


class TestScript:
    def test_dice_formats_agree_and_verify(self, tmp_path, capsys):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert run(["script", "--scenario", "honest", "--n-audits", "20", "--dice", "3,1,6"], a, capsys)[0] == 0
        assert run(["script", "--scenario", "honest", "--n-audits", "20", "--dice", "316"], b, capsys)[0] == 0
        assert run(["script", "--scenario", "honest", "--n-audits", "20", "--dice", "3162"], c, capsys)[0] == 0
        code, stdout, _ = run(["script", "--verify", str(a / "script.json"), str(b / "script.json")],
                              tmp_path / "v1", capsys)
        assert code == 0 and stdout.startswith("AGREE")
        code, stdout, _ = run(["script", "--verify", str(a / "script.json"), str(c / "script.json")],
                              tmp_path / "v2", capsys)
        assert code == 4 and stdout.startswith("DISAGREE")

    def test_fitted_model(self, tmp_path, capsys):
        hist = tmp_path / "hist.csv"
        hist.write_text("precinct,contest,choice,count\np1,governor,A,1\np2,governor,B,1\n")
        code, _, _ = run(["script", "--scenario", "honest", "--history", str(hist), "--n-audits", "10",
                          "--seed", "4"], tmp_path / "o", capsys)
        assert code == 0
        doc = json.loads((tmp_path / "o" / "script.json").read_text())
        assert {e["precinct"]: e["selections"]["governor"] for e in doc["entries"]} == {"p1": "A", "p2": "B"}
        assert str(hist) in [i["path"] for i in manifest(tmp_path / "o")["inputs"]]

    def test_malformed_history_reports_line(self, tmp_path, capsys):
        hist = tmp_path / "hist.csv"
        hist.write_text("precinct,contest,choice,count\np1,governor,A,lots\n")
        code, _, err = run(["script", "--scenario", "honest", "--history", str(hist), "--n-audits", "10",
                            "--seed", "4"], tmp_path / "o", capsys)
        assert code == 2 and "line 2" in err

    def test_needs_seed(self, tmp_path, capsys):
        code, _, err = run(["script", "--scenario", "honest", "--n-audits", "3"], tmp_path, capsys)
        assert code == 2 and "--seed" in err


class TestSimulate:
    def test_deterministic_and_worker_independent(self, tmp_path, capsys):
        outs = []
        for k, extra in enumerate([[], [], ["--workers", "2"]]):
            d = tmp_path / f"r{k}"
            assert run(["simulate", "honest", "--trials", "6", "--seed", "11", "--events", *extra], d, capsys)[0] == 0
            outs.append(d)
        for name in ("report.json", "summary.csv", "events.jsonl", "manifest.json"):
            blobs = {(d / name).read_bytes() for d in outs}
            assert len(blobs) == 1, name

    def test_events_are_ordered(self, tmp_path, capsys):
        run(["simulate", "uniform1pct", "--trials", "2", "--seed", "3", "--events"], tmp_path, capsys)
        recs = [json.loads(l) for l in (tmp_path / "events.jsonl").read_text().splitlines()]
        assert {r["type"] for r in recs} >= {"spoil", "catch"}
        for t in (0, 1):
            stamps = [r["timestamp"] for r in recs if r["trial"] == t]
            assert stamps == sorted(stamps)

    def test_bad_scenario(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"schema_version": 1}')
        code, _, err = run(["simulate", str(path)], tmp_path / "o", capsys)
        assert code == 2 and "election" in err

    def test_missing_scenario(self, tmp_path, capsys):
        code, _, _ = run(["simulate", str(tmp_path / "nope.json")], tmp_path / "o", capsys)
        assert code == 2


class TestMonitor:
    def events(self, path, n, start_hour=7):
        lines = [json.dumps({"timestamp": f"2020-11-03T{start_hour + i // 3600:02d}:{i // 60 % 60:02d}:{i % 60:02d}",
                             "location_id": "L1", "machine_id": "m1"}) for i in range(n)]
        path.write_text("\n".join(lines) + "\n")

    def test_threshold_boundary(self, tmp_path, capsys):
        ev = tmp_path / "ev.jsonl"
        self.events(ev, 2074)
        code, stdout, _ = run(["monitor", str(ev), "--cast", "200000"], tmp_path / "a", capsys)
        assert code == 0 and "transitions=0" in stdout
        self.events(ev, 2075)
        code, stdout, _ = run(["monitor", str(ev), "--cast", "200000"], tmp_path / "b", capsys)
        alarms = [json.loads(l) for l in (tmp_path / "b" / "alarms.jsonl").read_text().splitlines()]
        assert code == 0
        assert alarms == [{"count": 2075, "expected": 2000.0, "location_id": None, "scope": "global",
                           "state": "on", "threshold": 2074, "timestamp": alarms[0]["timestamp"]}]

    def test_stdin_and_cast_feed(self, tmp_path, capsys, monkeypatch):
        feed = tmp_path / "feed.jsonl"
        feed.write_text('{"timestamp": "2020-11-03T07:00:00", "location_id": "L1", "cast": 100}\n')
        events = "".join(json.dumps({"timestamp": f"2020-11-03T08:00:{i:02d}", "location_id": "L1",
                                     "machine_id": "m"}) + "\n" for i in range(8))
        code, stdout, _ = run(["monitor", "-", "--cast-feed", str(feed)], tmp_path, capsys, events, monkeypatch)
        assert code == 0 and "location_alarms=L1" in stdout

    def test_empty_input(self, tmp_path, capsys):
        ev = tmp_path / "ev.jsonl"
        ev.write_text("")
        code, stdout, _ = run(["monitor", str(ev)], tmp_path / "o", capsys)
        assert code == 0 and "events=0" in stdout

    def test_out_of_order(self, tmp_path, capsys):
        ev = tmp_path / "ev.jsonl"
        ev.write_text('{"timestamp": "2020-11-03T08:00:00", "location_id": "L", "machine_id": "m"}\n'
                      '{"timestamp": "2020-11-03T07:00:00", "location_id": "L", "machine_id": "m"}\n')
        code, _, err = run(["monitor", str(ev)], tmp_path / "o", capsys)
        assert code == 2 and "precedes" in err

    def test_malformed(self, tmp_path, capsys):
        ev = tmp_path / "ev.jsonl"
        ev.write_text("{oops\n")
        code, _, err = run(["monitor", str(ev)], tmp_path / "o", capsys)
        assert code == 2 and "line 1:" in err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bmdaudit.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and __version__ in proc.stdout
