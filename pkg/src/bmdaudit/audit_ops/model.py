"""Probabilistic model of how real voters fill in and operate a BMD.

The model has two halves.  Preferences are a per-precinct mixture of
components, each an independent categorical per contest; a straight-ticket
voter is a component whose categoricals are degenerate.  Machine-observable
behavior (session length, accessibility flags, arrival hour) is shared by
all precincts and, unless a joint histogram is given, session length and
each flag are independent.  Correlations such as slow input tracking party
preference are not represented by default.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from functools import cached_property
from typing import Any, Iterable, Mapping

from bmdaudit.errors import ConfigError, EmptyDataError, MalformedRecordError

__all__ = [
    "DEFAULT_SPEED_HISTOGRAM",
    "DEFAULT_FLAG_FREQUENCIES",
    "DEFAULT_ARRIVAL_PROFILE",
    "Behavior",
    "PreferenceComponent",
    "VoterBehaviorModel",
    "fit_model",
    "canonical_json",
]

# session length in minutes -> probability; used when no event-log timing is supplied
DEFAULT_SPEED_HISTOGRAM: tuple[tuple[int, float], ...] = (
    (2, 0.05), (3, 0.15), (4, 0.20), (5, 0.20), (6, 0.15), (8, 0.12), (10, 0.08), (15, 0.05),
)
DEFAULT_FLAG_FREQUENCIES: dict[str, float] = {"audio": 0.005, "button_box": 0.002, "large_font": 0.02}
# polls open 07:00-19:00 with flat arrivals
DEFAULT_ARRIVAL_PROFILE: tuple[tuple[int, float], ...] = tuple((h, 1 / 12) for h in range(7, 19))

JOINT_CONTEST = "*"
_NORM_TOL = 1e-9


def canonical_json(obj: Any) -> str:
    """Sorted-key, whitespace-free JSON used for hashing and agreement checks."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def _check_normalized(what: str, probs: Iterable[float]) -> None:
    probs = list(probs)
    if any(p < 0 or math.isnan(p) for p in probs):
        raise ConfigError(f"{what}: probabilities must be nonnegative")
    total = math.fsum(probs)
    if abs(total - 1.0) > _NORM_TOL:
        raise ConfigError(f"{what}: probabilities sum to {total!r}, not 1")


@dataclass(frozen=True)
class Behavior:
    speed_seconds: int
    flags: frozenset
    prob: float


@dataclass(frozen=True)
class PreferenceComponent:
    weight: float
    choices: Mapping[str, Mapping[str, float]]

    def to_dict(self) -> dict:
        return {"weight": self.weight, "choices": {c: dict(p) for c, p in self.choices.items()}}


@dataclass(frozen=True, eq=True)
class VoterBehaviorModel:
    preferences: Mapping[str, tuple[PreferenceComponent, ...]]
    speed_histogram: tuple[tuple[int, float], ...] = DEFAULT_SPEED_HISTOGRAM
    flag_frequencies: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FLAG_FREQUENCIES))
    arrival_profile: tuple[tuple[int, float], ...] = DEFAULT_ARRIVAL_PROFILE
    joint_behavior: tuple[tuple[int, tuple[str, ...], float], ...] | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    __hash__ = None  # mutable-looking mapping fields; use .hash for identity

    def __post_init__(self):
        if not self.preferences:
            raise ConfigError("model has no precincts")
        for precinct, comps in self.preferences.items():
            if not comps:
                raise ConfigError(f"precinct {precinct!r} has no preference components")
            _check_normalized(f"precinct {precinct!r} component weights", (c.weight for c in comps))
            contests = set(comps[0].choices)
            for comp in comps:
                if set(comp.choices) != contests:
                    raise ConfigError(f"precinct {precinct!r}: components disagree on contests")
                for contest, dist in comp.choices.items():
                    if not dist:
                        raise ConfigError(f"precinct {precinct!r} contest {contest!r} has no choices")
                    _check_normalized(f"precinct {precinct!r} contest {contest!r}", dist.values())
        if any(m < 1 for m, _ in self.speed_histogram):
            raise ConfigError("session lengths must be at least one minute")
        _check_normalized("speed histogram", (p for _, p in self.speed_histogram))
        for flag, f in self.flag_frequencies.items():
            if not 0 <= f <= 1:
                raise ConfigError(f"flag frequency for {flag!r} must lie in [0, 1]")
        if any(not 0 <= h < 24 for h, _ in self.arrival_profile):
            raise ConfigError("arrival hours must lie in 0..23")
        _check_normalized("arrival profile", (p for _, p in self.arrival_profile))
        if self.joint_behavior is not None:
            _check_normalized("joint behavior histogram", (p for _, _, p in self.joint_behavior))

    # views

    @property
    def precinct_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.preferences))

    def contests(self, precinct: str) -> tuple[str, ...]:
        return tuple(self.preferences[precinct][0].choices)

    def choice_probability(self, precinct: str, contest: str, choice: str) -> float:
        """Marginal probability that a voter in ``precinct`` picks ``choice``."""
        return math.fsum(
            c.weight * c.choices[contest].get(choice, 0.0) for c in self.preferences[precinct]
        )

    @cached_property
    def behaviors(self) -> tuple[Behavior, ...]:
        """Every (session length, flag set) pair with its probability, canonical order."""
        if self.joint_behavior is not None:
            rows = [Behavior(60 * m, frozenset(fl), p) for m, fl, p in self.joint_behavior if p > 0]
        else:
            flags = sorted(f for f, q in self.flag_frequencies.items() if q > 0)
            subsets = []
            for bits in itertools.product((False, True), repeat=len(flags)):
                p = 1.0
                chosen = []
                for flag, on in zip(flags, bits):
                    q = self.flag_frequencies[flag]
                    p *= q if on else 1 - q
                    if on:
                        chosen.append(flag)
                if p > 0:
                    subsets.append((frozenset(chosen), p))
            rows = [
                Behavior(60 * m, fl, pm * pf)
                for m, pm in self.speed_histogram if pm > 0
                for fl, pf in subsets
            ]
        return tuple(sorted(rows, key=lambda b: (b.speed_seconds, sorted(b.flags))))

    def hour_weight(self, hour: int) -> float:
        return dict(self.arrival_profile).get(hour, 0.0)

    # serialization

    def to_dict(self) -> dict:
        d = {
            "preferences": {
                p: [c.to_dict() for c in comps] for p, comps in sorted(self.preferences.items())
            },
            "speed_histogram": [list(x) for x in self.speed_histogram],
            "flag_frequencies": dict(sorted(self.flag_frequencies.items())),
            "arrival_profile": [list(x) for x in self.arrival_profile],
            "metadata": dict(self.metadata),
        }
        if self.joint_behavior is not None:
            d["joint_behavior"] = [[m, list(fl), p] for m, fl, p in self.joint_behavior]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "VoterBehaviorModel":
        try:
            prefs = {
                str(p): tuple(
                    PreferenceComponent(float(c["weight"]), {
                        str(k): {str(ch): float(v) for ch, v in dist.items()}
                        for k, dist in c["choices"].items()
                    })
                    for c in comps
                )
                for p, comps in d["preferences"].items()
            }
            kwargs: dict[str, Any] = {"preferences": prefs}
            if "speed_histogram" in d:
                kwargs["speed_histogram"] = tuple((int(m), float(p)) for m, p in d["speed_histogram"])
            if "flag_frequencies" in d:
                kwargs["flag_frequencies"] = {str(k): float(v) for k, v in d["flag_frequencies"].items()}
            if "arrival_profile" in d:
                kwargs["arrival_profile"] = tuple((int(h), float(p)) for h, p in d["arrival_profile"])
            if d.get("joint_behavior") is not None:
                kwargs["joint_behavior"] = tuple(
                    (int(m), tuple(sorted(fl)), float(p)) for m, fl, p in d["joint_behavior"]
                )
            kwargs["metadata"] = dict(d.get("metadata", {}))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed behavior model: {exc!r}") from None
        return cls(**kwargs)

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- fitting ----------------------------------------------------------------


def _open_lines(source) -> tuple[list[str], str]:
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, newline="", encoding="utf-8") as f:
            return f.read().splitlines(), str(source)
    if isinstance(source, str):
        return source.splitlines(), "<text>"
    if isinstance(source, io.IOBase):
        return source.read().splitlines(), "<stream>"
    return list(source), "<lines>"


def _read_rows(source, required: tuple[str, ...]):
    lines, _ = _open_lines(source)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        return
    header = [h.strip() for h in reader.fieldnames]
    missing = [c for c in required if c not in header]
    if missing:
        raise MalformedRecordError(f"missing column(s): {', '.join(missing)}", 1)
    reader.fieldnames = header
    for row in reader:
        if None in row or any(row.get(c) is None for c in required):
            raise MalformedRecordError("wrong number of fields", reader.line_num)
        yield reader.line_num, {k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()}


def _parse_joint(pattern: str, line: int) -> dict[str, str]:
    out = {}
    for part in pattern.split(";"):
        if "=" not in part:
            raise MalformedRecordError(f"joint ballot pattern {pattern!r} needs contest=choice pairs", line)
        k, v = part.split("=", 1)
        if k.strip() in out:
            raise MalformedRecordError(f"contest {k.strip()!r} repeated in pattern", line)
        out[k.strip()] = v.strip()
    return out


def fit_model(
    history,
    timing=None,
    precincts: Iterable[str] | None = None,
) -> VoterBehaviorModel:
    """Fit a behavior model by maximum likelihood.

    Args:
        history: CSV with columns ``precinct,contest,choice,count``.  A row
            whose contest is ``*`` carries a whole ballot as
            ``contest=choice;contest=choice`` in the choice column; a precinct
            given whole ballots becomes a mixture of degenerate components.
            Per-contest rows give a single independent component.
        timing: optional CSV of event-log sessions with columns
            ``machine,session_start,session_end`` and optional ``flags``
            (semicolon separated).  Without it the default histograms are
            used and ``metadata["timing_source"]`` is ``"default"``.
        precincts: precincts that must be present in ``history``.

    Raises:
        MalformedRecordError: a row does not parse; carries the line number.
        EmptyDataError: a precinct has no ballots (or a contest has none).
    """
    marginal: dict[str, dict[str, dict[str, int]]] = defaultdict(lambda: defaultdict(dict))
    joint: dict[str, dict[tuple, int]] = defaultdict(dict)
    seen: set[str] = set()
    for line, row in _read_rows(history, ("precinct", "contest", "choice", "count")):
        try:
            count = int(row["count"])
        except ValueError:
            raise MalformedRecordError(f"count {row['count']!r} is not an integer", line) from None
        if count < 0:
            raise MalformedRecordError("count must be nonnegative", line)
        precinct, contest, choice = row["precinct"], row["contest"], row["choice"]
        if not precinct or not contest or not choice:
            raise MalformedRecordError("empty precinct, contest or choice", line)
        seen.add(precinct)
        if contest == JOINT_CONTEST:
            key = tuple(sorted(_parse_joint(choice, line).items()))
            joint[precinct][key] = joint[precinct].get(key, 0) + count
        else:
            bucket = marginal[precinct][contest]
            bucket[choice] = bucket.get(choice, 0) + count

    expected = set(precincts) if precincts is not None else set()
    for p in sorted(expected - seen):
        raise EmptyDataError(f"precinct {p!r} has no historical ballots")

    prefs: dict[str, tuple[PreferenceComponent, ...]] = {}
    for p in sorted(seen | expected):
        if p in joint and p in marginal:
            raise ConfigError(f"precinct {p!r} mixes whole-ballot and per-contest rows")
        if p in joint:
            total = sum(joint[p].values())
            if total == 0:
                raise EmptyDataError(f"precinct {p!r} has no historical ballots")
            contest_sets = {tuple(k for k, _ in pattern) for pattern in joint[p]}
            if len(contest_sets) != 1:
                raise ConfigError(f"precinct {p!r}: whole-ballot rows cover different contests")
            prefs[p] = tuple(
                PreferenceComponent(n / total, {c: {ch: 1.0} for c, ch in pattern})
                for pattern, n in sorted(joint[p].items()) if n > 0
            )
        else:
            dists = {}
            for contest, counts in sorted(marginal[p].items()):
                total = sum(counts.values())
                if total == 0:
                    raise EmptyDataError(f"precinct {p!r} contest {contest!r} has no ballots")
                dists[contest] = {ch: n / total for ch, n in sorted(counts.items())}
            if not dists:
                raise EmptyDataError(f"precinct {p!r} has no historical ballots")
            prefs[p] = (PreferenceComponent(1.0, dists),)

    metadata: dict[str, Any] = {"timing_source": "default", "flags_source": "default"}
    kwargs: dict[str, Any] = {}
    if timing is not None:
        kwargs, timing_meta = _fit_timing(timing)
        metadata.update(timing_meta)
    return VoterBehaviorModel(preferences=prefs, metadata=metadata, **kwargs)


def _fit_timing(timing) -> tuple[dict, dict]:
    lengths: dict[int, int] = defaultdict(int)
    hours: dict[int, int] = defaultdict(int)
    flag_counts: dict[str, int] = defaultdict(int)
    has_flags = False
    n = 0
    for line, row in _read_rows(timing, ("machine", "session_start", "session_end")):
        try:
            start = datetime.fromisoformat(row["session_start"])
            end = datetime.fromisoformat(row["session_end"])
        except ValueError:
            raise MalformedRecordError("session times must be ISO 8601", line) from None
        if end < start:
            raise MalformedRecordError("session ends before it starts", line)
        minutes = max(1, int((end - start).total_seconds() // 60))
        lengths[minutes] += 1
        hours[start.hour] += 1
        if "flags" in row and row["flags"] is not None:
            has_flags = True
            for flag in filter(None, (f.strip() for f in row["flags"].split(";"))):
                flag_counts[flag] += 1
        n += 1
    if n == 0:
        return {}, {"timing_source": "default"}
    kwargs: dict[str, Any] = {
        "speed_histogram": tuple((m, c / n) for m, c in sorted(lengths.items())),
        "arrival_profile": tuple((h, c / n) for h, c in sorted(hours.items())),
    }
    meta = {"timing_source": "event_log", "sessions": n}
    if has_flags:
        kwargs["flag_frequencies"] = {f: c / n for f, c in sorted(flag_counts.items())}
        meta["flags_source"] = "event_log"
    return kwargs, meta
