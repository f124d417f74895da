"""Election configuration and the versioned scenario file format.

A scenario file is JSON::

    {
      "schema_version": 1,
      "name": "...",
      "election": {
        "contests":  [{"id": "gov", "choices": ["A", "B"], "scope": "countywide"},
                      {"id": "prop", "choices": ["yes", "no"], "scope": ["p1"]}],
        "locations": [{"id": "ev1", "machines": 20}],      # or "machine_ids": [...]
        "precincts": [{"id": "p1", "location": "ev1", "voters": 9000}],
        "schedule":  {"start_date": "2020-10-13", "days": 1, "open_minute": 420,
                      "close_minute": 1140, "slot_minutes": 60},
        "behavior":  {...VoterBehaviorModel.to_dict()...},
        "background_spoil_rate": 0.01,
        "review_detect_probability": 0.0,
        "max_spoil_attempts": 3,
        "reattack_on_retry": false,
        "canvass_scan_fraction": 0.0,
        "monitor": {"expected_rate": 0.01, "confidence": 0.95, "location_rates": {}}
      },
      "strategy": {"kind": "down_ballot", ...},
      "policy":   {"kind": "static", "n_audits": 300},
      "trials": 10000,
      "seed": 1
    }
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

from bmdaudit.audit_ops.model import VoterBehaviorModel
from bmdaudit.audit_ops.policy import OfficialPolicy, policy_from_dict
from bmdaudit.errors import ConfigError
from bmdaudit.schedule import FleetSchedule, Schedule
from bmdaudit.world.strategies import FlipRule, MalwareStrategy, strategy_from_dict

__all__ = [
    "SCENARIO_SCHEMA_VERSION",
    "Contest",
    "Precinct",
    "Location",
    "MonitorSettings",
    "ElectionConfig",
    "Scenario",
    "load_scenario",
]

SCENARIO_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Contest:
    id: str
    choices: tuple[str, ...]
    scope: tuple[str, ...] | None = None  # None: countywide

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ConfigError(f"contest {self.id!r} needs at least two choices")
        if len(set(self.choices)) != len(self.choices):
            raise ConfigError(f"contest {self.id!r} has duplicate choices")
        if self.scope is not None and not self.scope:
            raise ConfigError(f"contest {self.id!r} has an empty scope")

    def to_dict(self) -> dict:
        return {"id": self.id, "choices": list(self.choices),
                "scope": "countywide" if self.scope is None else list(self.scope)}


@dataclass(frozen=True)
class Precinct:
    id: str
    location: str
    voters: int

    def __post_init__(self):
        if isinstance(self.voters, bool) or not isinstance(self.voters, int) or self.voters < 0:
            raise ConfigError(f"precinct {self.id!r} voter count must be a nonnegative integer")


@dataclass(frozen=True)
class Location:
    id: str
    machine_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.machine_ids:
            raise ConfigError(f"location {self.id!r} has no machines")


@dataclass(frozen=True)
class MonitorSettings:
    expected_rate: float | None = None  # None: the background spoil rate
    confidence: float = 0.95
    location_rates: Mapping[str, float] = field(default_factory=dict)

    __hash__ = None


@dataclass(frozen=True)
class ElectionConfig:
    contests: tuple[Contest, ...]
    precincts: tuple[Precinct, ...]
    locations: tuple[Location, ...]
    behavior: VoterBehaviorModel
    schedule: Schedule = Schedule()
    background_spoil_rate: float = 0.01
    review_detect_probability: float = 0.0
    max_spoil_attempts: int = 3
    reattack_on_retry: bool = False
    canvass_scan_fraction: float = 0.0
    monitor: MonitorSettings = MonitorSettings()

    __hash__ = None

    def __post_init__(self):
        if not self.contests:
            raise ConfigError("election needs at least one contest")
        ids = [c.id for c in self.contests]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate contest ids")
        pids = [p.id for p in self.precincts]
        if len(set(pids)) != len(pids):
            raise ConfigError("duplicate precinct ids")
        locs = {loc.id for loc in self.locations}
        if len(locs) != len(self.locations):
            raise ConfigError("duplicate location ids")
        machines = [m for loc in self.locations for m in loc.machine_ids]
        if len(set(machines)) != len(machines):
            raise ConfigError("machine ids must be unique across the fleet")
        for c in self.contests:
            for p in c.scope or ():
                if p not in pids:
                    raise ConfigError(f"contest {c.id!r} scope names unknown precinct {p!r}")
        for p in self.precincts:
            if p.location not in locs:
                raise ConfigError(f"precinct {p.id!r} votes at unknown location {p.location!r}")
            if p.id not in self.behavior.preferences:
                raise ConfigError(f"behavior model has no preferences for precinct {p.id!r}")
            style = set(self.ballot_style(p.id))
            modelled = set(self.behavior.contests(p.id))
            if style != modelled:
                raise ConfigError(
                    f"precinct {p.id!r}: model contests {sorted(modelled)} differ from ballot style {sorted(style)}"
                )
            for comp in self.behavior.preferences[p.id]:
                for contest, dist in comp.choices.items():
                    bad = set(dist) - set(self.contest_map[contest].choices)
                    if bad:
                        raise ConfigError(f"precinct {p.id!r}: unknown choice(s) {sorted(bad)} in {contest!r}")
        extra = set(self.behavior.preferences) - set(pids)
        if extra:
            raise ConfigError(f"behavior model names unknown precinct(s) {sorted(extra)}")
        for name in ("background_spoil_rate", "review_detect_probability", "canvass_scan_fraction"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or math.isnan(v) or not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v!r}")
        if isinstance(self.max_spoil_attempts, bool) or not isinstance(self.max_spoil_attempts, int) \
                or self.max_spoil_attempts < 1:
            raise ConfigError("max_spoil_attempts must be an integer >= 1")
        rate = self.monitor_rate
        if not 0 < rate < 1:
            raise ConfigError("monitor expected rate must lie in (0, 1); set monitor.expected_rate")
        if not 0 < self.monitor.confidence < 1:
            raise ConfigError("monitor confidence must lie in (0, 1)")
        for loc, r in self.monitor.location_rates.items():
            if loc not in locs or not 0 < r < 1:
                raise ConfigError(f"bad monitor rate override for location {loc!r}")

    @cached_property
    def contest_map(self) -> dict[str, Contest]:
        return {c.id: c for c in self.contests}

    @property
    def monitor_rate(self) -> float:
        if self.monitor.expected_rate is not None:
            return self.monitor.expected_rate
        return self.background_spoil_rate

    @property
    def total_voters(self) -> int:
        return sum(p.voters for p in self.precincts)

    def ballot_style(self, precinct: str) -> tuple[str, ...]:
        return tuple(c.id for c in self.contests if c.scope is None or precinct in c.scope)

    def fleet_schedule(self) -> FleetSchedule:
        return FleetSchedule(
            schedule=self.schedule,
            machines={loc.id: loc.machine_ids for loc in self.locations},
            precincts=tuple((p.id, p.location, p.voters) for p in self.precincts),
            ballot_styles={p.id: self.ballot_style(p.id) for p in self.precincts},
            contest_choices={c.id: c.choices for c in self.contests},
        )

    def flippable_voters(self, contest: str, flip: FlipRule) -> float:
        """Expected number of voters whose selection in ``contest`` ``flip`` can change."""
        total = 0.0
        for p in self.precincts:
            if contest not in self.ballot_style(p.id):
                continue
            share = math.fsum(
                self.behavior.choice_probability(p.id, contest, ch)
                for ch in self.contest_map[contest].choices if flip.flippable(ch)
            )
            total += p.voters * share
        return total

    def flippable_share(self, contest: str, flip: FlipRule) -> float:
        eligible = sum(p.voters for p in self.precincts if contest in self.ballot_style(p.id))
        return self.flippable_voters(contest, flip) / eligible if eligible else 0.0

    # serialization

    def to_dict(self) -> dict:
        return {
            "contests": [c.to_dict() for c in self.contests],
            "locations": [{"id": loc.id, "machine_ids": list(loc.machine_ids)} for loc in self.locations],
            "precincts": [{"id": p.id, "location": p.location, "voters": p.voters} for p in self.precincts],
            "schedule": self.schedule.to_dict(),
            "behavior": self.behavior.to_dict(),
            "background_spoil_rate": self.background_spoil_rate,
            "review_detect_probability": self.review_detect_probability,
            "max_spoil_attempts": self.max_spoil_attempts,
            "reattack_on_retry": self.reattack_on_retry,
            "canvass_scan_fraction": self.canvass_scan_fraction,
            "monitor": {
                "expected_rate": self.monitor.expected_rate,
                "confidence": self.monitor.confidence,
                "location_rates": dict(sorted(self.monitor.location_rates.items())),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ElectionConfig":
        try:
            contests = tuple(
                Contest(
                    str(c["id"]), tuple(str(x) for x in c["choices"]),
                    None if c.get("scope", "countywide") == "countywide" else tuple(c["scope"]),
                )
                for c in d["contests"]
            )
            locations = []
            for loc in d["locations"]:
                if "machine_ids" in loc:
                    ids = tuple(str(m) for m in loc["machine_ids"])
                else:
                    n = int(loc["machines"])
                    ids = tuple(f"{loc['id']}-{i:03d}" for i in range(1, n + 1))
                locations.append(Location(str(loc["id"]), ids))
            precincts = tuple(Precinct(str(p["id"]), str(p["location"]), p["voters"]) for p in d["precincts"])
            mon = d.get("monitor", {})
            monitor = MonitorSettings(
                expected_rate=mon.get("expected_rate"),
                confidence=float(mon.get("confidence", 0.95)),
                location_rates={str(k): float(v) for k, v in mon.get("location_rates", {}).items()},
            )
            return cls(
                contests=contests,
                precincts=precincts,
                locations=tuple(locations),
                behavior=VoterBehaviorModel.from_dict(d["behavior"]),
                schedule=Schedule.from_dict(d.get("schedule", {})),
                background_spoil_rate=float(d.get("background_spoil_rate", 0.01)),
                review_detect_probability=float(d.get("review_detect_probability", 0.0)),
                max_spoil_attempts=d.get("max_spoil_attempts", 3),
                reattack_on_retry=bool(d.get("reattack_on_retry", False)),
                canvass_scan_fraction=float(d.get("canvass_scan_fraction", 0.0)),
                monitor=monitor,
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed election config: {exc!r}") from None


@dataclass(frozen=True)
class Scenario:
    name: str
    config: ElectionConfig
    strategy: MalwareStrategy
    policy: OfficialPolicy
    trials: int = 1
    seed: int = 0

    __hash__ = None

    def __post_init__(self):
        if isinstance(self.trials, bool) or not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENARIO_SCHEMA_VERSION,
            "name": self.name,
            "election": self.config.to_dict(),
            "strategy": self.strategy.to_dict(),
            "policy": self.policy.to_dict(),
            "trials": self.trials,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        if not isinstance(d, Mapping):
            raise ConfigError("scenario must be a JSON object")
        if d.get("schema_version") != SCENARIO_SCHEMA_VERSION:
            raise ConfigError(f"unsupported scenario schema_version {d.get('schema_version')!r}")
        for key in ("election", "strategy", "policy"):
            if key not in d:
                raise ConfigError(f"scenario is missing {key!r}")
        return cls(
            name=str(d.get("name", "scenario")),
            config=ElectionConfig.from_dict(d["election"]),
            strategy=strategy_from_dict(d["strategy"]),
            policy=policy_from_dict(d["policy"]),
            trials=d.get("trials", 1),
            seed=d.get("seed", 0),
        )


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return Scenario.from_dict(data)
