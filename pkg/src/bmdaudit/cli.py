"""Command-line front end.

Every command writes its artifacts plus ``manifest.json`` into the output
directory (``--out``, else ``$BMDAUDIT_OUT``, else ``./bmdaudit-out``) and
prints the main table to stdout.  Manifests carry no timestamps, so rerunning
a command with the same arguments reproduces every output byte for byte.

Exit codes:
    0  success
    2  invalid parameters, configuration or input records
    3  internal error
    4  ``script --verify``: the scripts disagree
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

from bmdaudit import __version__
from bmdaudit.audit_ops.model import VoterBehaviorModel, canonical_json, fit_model
from bmdaudit.audit_ops.script import AuditScript, generate_script, parse_dice, seed_from_dice, verify_agreement
from bmdaudit.audit_stats import (
    StaffingInput,
    detection_probability,
    oracle_min_audits,
    oracle_survival,
    staffing_plan,
    with_replacement_equivalent,
)
from bmdaudit.errors import (
    BmdAuditError,
    ConfigError,
    InvalidParameterError,
    MalformedRecordError,
    OutOfOrderError,
    UnreachableError,
)
from bmdaudit.spoilage import SpoilageModel, SpoilageMonitor, margin_delta, parse_events, _parse_timestamp
from bmdaudit.world.config import Scenario, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTERNAL = 3
EXIT_DISAGREE = 4

ENV_OUT = "BMDAUDIT_OUT"
DEFAULT_OUT = "bmdaudit-out"
MANIFEST_SCHEMA_VERSION = 1

DETECTION_GRID: tuple[tuple[float, tuple[int, ...]], ...] = (
    (0.01, (40, 80, 120, 160, 200, 240, 280, 320, 500)),
    (0.05, (10, 20, 30, 40, 50, 60)),
    (0.10, (10, 20, 30, 40, 50)),
    (0.15, (10, 20, 30, 40, 50)),
)
MARGIN_DETECT = (0.10, 0.30, 0.50)
MARGIN_SIZES = (9_000, 200_000, 1_200_000)
MARGIN_RATE = 0.01


class _Run:
    """Collects outputs and the manifest for one command invocation."""

    def __init__(self, out_dir: Path, command: str, params: dict):
        self.out_dir = out_dir
        self.command = command
        self.params = params
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def add_input(self, path: str | Path) -> bytes:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def write(self, name: str, data: str | bytes) -> Path:
        if isinstance(data, str):
            data = data.encode("utf-8")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        path.write_bytes(data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()
        return path

    def finish(self) -> None:
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "tool": "bmdaudit",
            "tool_version": __version__,
            "command": self.command,
            "parameters": self.params,
            "inputs": [{"path": p, "sha256": h} for p, h in sorted(self.inputs.items())],
            "outputs": [{"path": p, "sha256": h} for p, h in sorted(self.outputs.items())],
        }
        self.write("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in cells)


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(run: _Run, stem: str, fmt: str, header, rows, records) -> str:
    if fmt == "csv":
        body = _csv(header, rows)
    elif fmt == "text":
        body = _text(header, rows)
    else:
        body = _json(records)
    run.write(f"{stem}.{ {'csv': 'csv', 'text': 'txt', 'json': 'json'}[fmt] }", body)
    return body


def _fmt_p(p: float) -> str:
    return f"{p:.2f}" if round(p, 2) == p else repr(p)


def _fmt_percent_int(x: float) -> str:
    v = x * 100
    return str(int(round(v))) if abs(v - round(v)) < 1e-9 else repr(v)


# -- commands -------------------------------------------------------------------


def cmd_table_detection(args, run: _Run) -> int:
    if (args.p is None) != (args.n is None):
        raise InvalidParameterError("--p and --n must be given together")
    if args.p is not None:
        grid = [(p, n) for p in args.p for n in args.n]
    else:
        grid = [(p, n) for p, ns in DETECTION_GRID for n in ns]
    rows, records = [], []
    for p, n in grid:
        prob = detection_probability(p, n)
        rows.append((_fmt_p(p), n, f"{100 * prob:.2f}"))
        records.append({"cheat_rate": p, "audits": n, "detection_probability": prob})
    sys.stdout.write(_emit(run, "table_detection", args.format, ("p", "n", "detection_percent"), rows, records))
    return EXIT_OK


def cmd_table_margin(args, run: _Run) -> int:
    rows, records = [], []
    for d in args.detect:
        for size in args.sizes:
            m = SpoilageModel(size, args.rate, d, args.confidence)
            delta = margin_delta(m)
            rows.append((_fmt_percent_int(d), size, f"{delta:.3f}"))
            records.append({"detection_fraction": d, "ballots": size, "expected_rate": args.rate,
                            "confidence": args.confidence, "margin_delta_percent": delta})
    sys.stdout.write(_emit(run, "table_margin", args.format,
                           ("detect_percent", "ballots", "margin_delta_percent"), rows, records))
    return EXIT_OK


def cmd_oracle(args, run: _Run) -> int:
    try:
        n = oracle_min_audits(args.total, args.tampered, args.risk)
    except UnreachableError:
        raise InvalidParameterError(
            f"unreachable risk limit: with {args.tampered} tampered ballots survival never drops below 1"
        ) from None
    rec = {
        "total_ballots": args.total,
        "tampered": args.tampered,
        "risk_limit": args.risk,
        "min_audits": n,
        "survival_at_n": oracle_survival(args.total, args.tampered, n),
        "survival_at_n_minus_1": oracle_survival(args.total, args.tampered, n - 1),
        "with_replacement_detection": with_replacement_equivalent(args.total, args.tampered, n),
    }
    rows = [(k, v if not isinstance(v, float) else f"{v:.6g}") for k, v in rec.items()]
    rows.append(("with_replacement_detection_percent", f"{100 * rec['with_replacement_detection']:.2f}"))
    sys.stdout.write(_emit(run, "oracle", args.format, ("quantity", "value"), rows, rec))
    return EXIT_OK


def cmd_staffing(args, run: _Run) -> int:
    if len(args.shares) != 3:
        raise InvalidParameterError("--shares takes early, election-day and mail fractions")
    plan = staffing_plan(StaffingInput(args.total_audits, *args.shares, args.early_locations,
                                       args.early_days, args.teams))
    rec = plan.rounded(2)
    rows = [(k, f"{v:.2f}") for k, v in rec.items()]
    sys.stdout.write(_emit(run, "staffing", args.format, ("quantity", "value"), rows, rec))
    return EXIT_OK


def _resolve_scenario(path: str) -> Path | None:
    p = Path(path)
    if p.exists():
        return None
    name = p.name if p.suffix == ".json" else p.name + ".json"
    res = resources.files("bmdaudit").joinpath("scenarios", name)
    return res if res.is_file() else None


def _load_scenario(run: _Run, path: str) -> Scenario:
    bundled = _resolve_scenario(path)
    if bundled is not None:
        data = bundled.read_bytes()
        run.inputs[f"bundled:{bundled.name}"] = hashlib.sha256(data).hexdigest()
    else:
        data = run.add_input(path)
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return Scenario.from_dict(doc)


def _seed_from_args(args, default: int | None) -> tuple[int, str | None]:
    if args.dice is not None:
        rolls = parse_dice(args.dice)
        return seed_from_dice(rolls), "".join(map(str, rolls))
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise InvalidParameterError("--seed must be an unsigned 64-bit integer")
        return args.seed, None
    if default is None:
        raise InvalidParameterError("give --seed or --dice")
    return default, None


def cmd_simulate(args, run: _Run) -> int:
    from bmdaudit.world.engine import simulate

    sc = _load_scenario(run, args.scenario)
    seed, dice = _seed_from_args(args, sc.seed)
    trials = args.trials if args.trials is not None else sc.trials
    run.params.update({"seed": str(seed), "dice": dice, "trials": trials})
    keep = args.events or trials <= 100
    report = simulate(sc.config, sc.strategy, sc.policy, trials, seed, workers=args.workers,
                      keep_outcomes=keep, record_events=args.events)
    doc = report.to_dict(include_outcomes=keep)
    doc["scenario"] = sc.name
    run.write("report.json", canonical_json(doc) + "\n")
    if args.events:
        lines = []
        for o in report.outcomes:
            for rec in o.event_records(sc.config):
                lines.append(canonical_json(dict(rec, trial=o.index)))
        run.write("events.jsonl", "".join(l + "\n" for l in lines))
    summary = report.summary()
    rows = [(m, f"{v['mean']:.6f}", f"{v['se']:.6f}") for m, v in summary.items()]
    header = ("metric", "mean", "se")
    sys.stdout.write(f"# {sc.name}: {trials} trials, seed {seed}\n" if args.format == "text" else "")
    sys.stdout.write(_emit(run, "summary", args.format, header, rows, summary))
    return EXIT_OK


def _script_model(args, run: _Run, sc: Scenario) -> VoterBehaviorModel:
    if args.model:
        try:
            return VoterBehaviorModel.from_dict(json.loads(run.add_input(args.model)))
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"{args.model}: invalid JSON ({exc.msg})", exc.lineno) from None
    if args.history:
        hist = run.add_input(args.history).decode("utf-8")
        timing = run.add_input(args.timing).decode("utf-8") if args.timing else None
        return fit_model(io.StringIO(hist), io.StringIO(timing) if timing is not None else None)
    return sc.config.behavior


def cmd_script(args, run: _Run) -> int:
    if args.verify:
        if len(args.verify) < 2:
            raise InvalidParameterError("--verify needs at least two script files")
        blobs = []
        for path in args.verify:
            data = run.add_input(path)
            AuditScript.loads(data)  # reject malformed files before comparing
            blobs.append(data)
        same = verify_agreement(blobs)
        verdict = "AGREE" if same else "DISAGREE: evidence of a tampered generator"
        run.write("verify.txt", verdict + "\n")
        sys.stdout.write(verdict + "\n")
        return EXIT_OK if same else EXIT_DISAGREE
    if not args.scenario:
        raise InvalidParameterError("script generation needs --scenario for the fleet layout")
    sc = _load_scenario(run, args.scenario)
    model = _script_model(args, run, sc)
    seed, dice = _seed_from_args(args, None)
    n = args.n_audits if args.n_audits is not None else sc.policy.n_audits
    if n is None:
        raise InvalidParameterError("give --n-audits")
    run.params.update({"seed": str(seed), "dice": dice, "n_audits": n})
    script = generate_script(model, sc.config.fleet_schedule(), n, seed)
    run.write("script.json", script.canonical_bytes())
    sys.stdout.write(f"{len(script)} entries, sha256 {script.hash}\n")
    return EXIT_OK


def _read_lines(run: _Run, path: str) -> list[str]:
    if path == "-":
        data = sys.stdin.read()
        run.inputs["<stdin>"] = hashlib.sha256(data.encode()).hexdigest()
        return data.splitlines()
    return run.add_input(path).decode("utf-8").splitlines()


def _parse_feed(lines: list[str]) -> list[tuple[Any, str | None, int]]:
    feed = []
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"cast feed: invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict) or "timestamp" not in rec or "cast" not in rec:
            raise MalformedRecordError("cast feed records need 'timestamp' and 'cast'", lineno)
        cast = rec["cast"]
        if isinstance(cast, bool) or not isinstance(cast, int) or cast < 0:
            raise MalformedRecordError("cast must be a nonnegative integer", lineno)
        loc = rec.get("location_id")
        feed.append((_parse_timestamp(rec["timestamp"], lineno), None if loc is None else str(loc), cast))
    return feed


def cmd_monitor(args, run: _Run) -> int:
    rates = {}
    for item in args.location_rate or ():
        loc, sep, val = item.partition("=")
        if not sep:
            raise InvalidParameterError(f"--location-rate expects LOC=RATE, got {item!r}")
        rates[loc] = float(val)
    mon = SpoilageMonitor(args.expected_rate, args.confidence, rates)
    if args.cast is not None:
        mon.set_total_cast(args.cast)
    feed = _parse_feed(_read_lines(run, args.cast_feed)) if args.cast_feed else []
    events = list(parse_events(_read_lines(run, args.events)))
    fi = 0
    try:
        for ev in events:
            while fi < len(feed) and feed[fi][0] <= ev.timestamp:
                ts, loc, cast = feed[fi]
                mon.set_total_cast(cast) if loc is None else mon.set_cast(loc, cast)
                mon.evaluate(ts)
                fi += 1
            mon.ingest(ev)
        for ts, loc, cast in feed[fi:]:
            mon.set_total_cast(cast) if loc is None else mon.set_cast(loc, cast)
            mon.evaluate(ts)
    except TypeError:
        raise MalformedRecordError("timestamps mix time-zone-aware and naive values") from None
    records = [t.to_record() for t in mon.transitions]
    run.write("alarms.jsonl", "".join(canonical_json(r) + "\n" for r in records))
    snap = mon.snapshot()
    summary = {
        "events": snap["total"],
        "total_cast": snap["total_cast"],
        "alarm_transitions": len(records),
        "global_alarm": snap["global_alarm"],
        "location_alarms": snap["location_alarms"],
        "counts": snap["counts"],
    }
    run.write("monitor_summary.json", _json(summary))
    if args.format == "json":
        sys.stdout.write(_json({"transitions": records, "summary": summary}))
    else:
        rows = [(r["timestamp"], r["scope"], r["location_id"] or "*", "ALARM" if r["state"] == "on" else "clear",
                 r["count"], r["threshold"], f"{r['expected']:.1f}") for r in records]
        header = ("timestamp", "scope", "location", "state", "count", "threshold", "expected")
        body = _csv(header, rows) if args.format == "csv" else _text(header, rows)
        sys.stdout.write(body)
        sys.stdout.write(
            f"summary: events={summary['events']} cast={summary['total_cast']} "
            f"transitions={summary['alarm_transitions']} global_alarm={summary['global_alarm']} "
            f"location_alarms={','.join(summary['location_alarms']) or '-'}\n"
        )
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _probability(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 <= v <= 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1]: {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmdaudit", description="Live-audit and spoiled-ballot detection tools.")
    parser.add_argument("--version", action="version", version=f"bmdaudit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
    common.add_argument("--format", choices=("csv", "json", "text"), default="csv", help="stdout table format")
    seeded = argparse.ArgumentParser(add_help=False)
    g = seeded.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    g.add_argument("--dice", help="die rolls 1-6, e.g. 3,1,6,6,2")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("table-detection", parents=[common], help="detection probability table")
    p.add_argument("--p", type=_probability, nargs="+", help="cheat rates for a custom table")
    p.add_argument("--n", type=int, nargs="+", help="audit counts for a custom table")
    p.set_defaults(func=cmd_table_detection)

    p = sub.add_parser("table-margin", parents=[common], help="undetectable margin change table")
    p.add_argument("--rate", type=float, default=MARGIN_RATE, help="expected spoil rate")
    p.add_argument("--sizes", type=int, nargs="+", default=list(MARGIN_SIZES), help="ballots cast")
    p.add_argument("--detect", type=float, nargs="+", default=list(MARGIN_DETECT),
                   help="fractions of voters who notice tampering")
    p.add_argument("--confidence", type=float, default=0.95)
    p.set_defaults(func=cmd_table_margin)

    p = sub.add_parser("oracle", parents=[common], help="shoulder-surfing oracle bound")
    p.add_argument("total", type=int, help="ballots cast (N)")
    p.add_argument("tampered", type=int, help="tampered ballots (T)")
    p.add_argument("risk", type=float, help="acceptable survival probability, e.g. 0.05")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("staffing", parents=[common], help="audits per location and team")
    p.add_argument("--total-audits", type=int, required=True)
    p.add_argument("--shares", type=float, nargs=3, required=True, metavar=("EARLY", "ELECTION_DAY", "MAIL"))
    p.add_argument("--early-locations", type=int, required=True)
    p.add_argument("--early-days", type=int, required=True)
    p.add_argument("--teams", type=int, required=True, help="Election Day audit teams")
    p.set_defaults(func=cmd_staffing)

    p = sub.add_parser("simulate", parents=[common, seeded], help="run a scenario file")
    p.add_argument("scenario", help="scenario JSON path or bundled name (honest, baytown, baytown400, uniform1pct)")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int, default=1, help="worker processes (does not change results)")
    p.add_argument("--events", action="store_true", help="also write events.jsonl for every trial")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("script", parents=[common, seeded], help="generate or verify audit scripts")
    p.add_argument("--scenario", help="scenario supplying the fleet and, by default, the voter model")
    p.add_argument("--model", help="voter model JSON")
    p.add_argument("--history", help="historical tallies CSV (precinct,contest,choice,count)")
    p.add_argument("--timing", help="session timing CSV (machine,session_start,session_end[,flags])")
    p.add_argument("--n-audits", type=int)
    p.add_argument("--verify", nargs="+", metavar="SCRIPT", help="compare scripts; exit 4 on disagreement")
    p.set_defaults(func=cmd_script)

    p = sub.add_parser("monitor", parents=[common], help="replay a spoil-event stream")
    p.add_argument("events", help="line-delimited JSON events, or - for stdin")
    p.add_argument("--expected-rate", type=float, default=0.01)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--cast", type=int, help="total ballots cast (constant)")
    p.add_argument("--cast-feed", help="line-delimited JSON {timestamp, cast, location_id?}")
    p.add_argument("--location-rate", action="append", metavar="LOC=RATE")
    p.set_defaults(func=cmd_monitor)
    return parser


def _params(args) -> dict:
    skip = {"func", "out", "workers"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out or os.environ.get(ENV_OUT) or DEFAULT_OUT)
    run = _Run(out, args.command, _params(args))
    func: Callable = args.func
    try:
        code = func(args, run)
        run.finish()
        return code
    except (ConfigError, InvalidParameterError, UnreachableError, OutOfOrderError) as exc:
        print(f"bmdaudit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BmdAuditError as exc:
        cause = exc.__cause__
        if isinstance(cause, (ConfigError, InvalidParameterError)):
            print(f"bmdaudit: error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"bmdaudit: runtime error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort report
        print(f"bmdaudit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
