"""Malware strategies and the per-session decision they make.

A strategy only ever sees an :class:`ObservableSession`: what the machine
itself could measure.  There is no field telling it whether the person at
the screen is an auditor, so auditor indistinguishability holds by
construction.

Rates are calibrated against the configured voter population when a
strategy is bound to an election (:meth:`MalwareStrategy.bind`):

* ``UniformSwitch`` / ``InconsistentBarcode``: ``rate`` is the fraction of
  all sessions on ballots carrying the target contest that get tampered.  It
  is spread over the sessions whose selection the flip rule can change.
* ``DownBallot``: ``budget`` is the expected number of tampered voter
  sessions.  By default each flippable session is hit independently with
  ``budget / flippable_voters``; ``exact=True`` tampers exactly ``budget``
  sessions chosen uniformly.
* ``TriggeredSwitch`` / ``SecretKnock``: ``rate`` applies to flippable
  sessions that satisfy the trigger (or follow the knock).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, ClassVar, Mapping

from bmdaudit.errors import ConfigError

if TYPE_CHECKING:
    from bmdaudit.world.config import ElectionConfig

__all__ = [
    "ObservableSession",
    "FlipRule",
    "Trigger",
    "MalwareStrategy",
    "Honest",
    "UniformSwitch",
    "TriggeredSwitch",
    "DownBallot",
    "SecretKnock",
    "InconsistentBarcode",
    "BoundMalware",
    "strategy_from_dict",
]


@dataclass(frozen=True)
class ObservableSession:
    """Everything malware can observe about one BMD session."""

    day: int
    minute_of_day: int
    speed_seconds: int
    flags: frozenset = frozenset()
    selections: Mapping[str, str] = field(default_factory=dict)
    armed: bool = False  # the machine has seen the secret knock earlier


@dataclass(frozen=True)
class FlipRule:
    """Change a selection to ``to``; optionally only from the ``from_`` choices."""

    to: str
    from_: tuple[str, ...] | None = None

    def flippable(self, choice: str | None) -> bool:
        if choice is None or choice == self.to:
            return False
        return self.from_ is None or choice in self.from_

    def to_dict(self) -> dict:
        d: dict = {"to": self.to}
        if self.from_ is not None:
            d["from"] = list(self.from_)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FlipRule":
        frm = d.get("from")
        if isinstance(frm, str):
            frm = [frm]
        return cls(str(d["to"]), tuple(frm) if frm is not None else None)


@dataclass(frozen=True)
class Trigger:
    """Conjunction of observable conditions; unset conditions always hold."""

    min_speed_seconds: int | None = None
    max_speed_seconds: int | None = None
    flags_any: tuple[str, ...] = ()
    minute_range: tuple[int, int] | None = None  # [start, end) minute of day
    days: tuple[int, ...] | None = None

    def __call__(self, s: ObservableSession) -> bool:
        if self.min_speed_seconds is not None and s.speed_seconds < self.min_speed_seconds:
            return False
        if self.max_speed_seconds is not None and s.speed_seconds > self.max_speed_seconds:
            return False
        if self.flags_any and not s.flags.intersection(self.flags_any):
            return False
        if self.minute_range is not None and not self.minute_range[0] <= s.minute_of_day < self.minute_range[1]:
            return False
        if self.days is not None and s.day not in self.days:
            return False
        return True

    def to_dict(self) -> dict:
        d: dict = {}
        if self.min_speed_seconds is not None:
            d["min_speed_seconds"] = self.min_speed_seconds
        if self.max_speed_seconds is not None:
            d["max_speed_seconds"] = self.max_speed_seconds
        if self.flags_any:
            d["flags_any"] = list(self.flags_any)
        if self.minute_range is not None:
            d["minute_range"] = list(self.minute_range)
        if self.days is not None:
            d["days"] = list(self.days)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trigger":
        return cls(
            min_speed_seconds=d.get("min_speed_seconds"),
            max_speed_seconds=d.get("max_speed_seconds"),
            flags_any=tuple(d.get("flags_any", ())),
            minute_range=tuple(d["minute_range"]) if d.get("minute_range") is not None else None,
            days=tuple(d["days"]) if d.get("days") is not None else None,
        )


@dataclass(frozen=True)
class BoundMalware:
    """A strategy calibrated to one election.

    Attributes:
        contest: target contest id, or ``None`` for honest machines.
        flip: how a tampered selection changes.
        barcode_only: tampering alters the barcode but not the printed text.
        decide: probability of tampering with a session, from observables only.
        exact_budget: tamper exactly this many sessions (``DownBallot`` exact mode).
        accomplice_rate: per-voter probability of entering the secret knock.
    """

    contest: str | None
    flip: FlipRule | None
    decide: Callable[[ObservableSession], float]
    barcode_only: bool = False
    exact_budget: int | None = None
    accomplice_rate: float = 0.0

    def probability(self, session: ObservableSession) -> float:
        return self.decide(session)


def _check_rate(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or math.isnan(value) or not 0 <= value <= 1:
        raise ConfigError(f"{name} must lie in [0, 1], got {value!r}")


class MalwareStrategy:
    kind: ClassVar[str] = ""

    def bind(self, config: "ElectionConfig") -> BoundMalware:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _target(self, config: "ElectionConfig") -> str:
        contest = getattr(self, "contest", None) or config.contests[0].id
        if contest not in config.contest_map:
            raise ConfigError(f"strategy targets unknown contest {contest!r}")
        flip = getattr(self, "flip", None)
        if flip is not None:
            choices = config.contest_map[contest].choices
            if flip.to not in choices or any(c not in choices for c in flip.from_ or ()):
                raise ConfigError(f"flip rule names a choice not on contest {contest!r}")
        return contest


def _flippable_rate(rate: float, flip: FlipRule, contest: str, config: "ElectionConfig", what: str) -> float:
    share = config.flippable_share(contest, flip)
    if rate == 0:
        return 0.0
    if share <= 0 or rate > share + 1e-12:
        raise ConfigError(
            f"{what}: rate {rate!r} exceeds the share of sessions the flip rule can change ({share!r})"
        )
    return min(1.0, rate / share)


@dataclass(frozen=True)
class Honest(MalwareStrategy):
    kind: ClassVar[str] = "honest"

    def bind(self, config):
        return BoundMalware(contest=None, flip=None, decide=lambda s: 0.0)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class UniformSwitch(MalwareStrategy):
    """Switched-intent attack on a fixed fraction of sessions."""

    rate: float
    flip: FlipRule
    contest: str | None = None  # None: top of the ticket
    kind: ClassVar[str] = "uniform_switch"

    def __post_init__(self):
        _check_rate("rate", self.rate)

    def bind(self, config):
        contest = self._target(config)
        q = _flippable_rate(self.rate, self.flip, contest, config, self.kind)
        flip = self.flip
        return BoundMalware(contest, flip, lambda s: q if flip.flippable(s.selections.get(contest)) else 0.0)

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "contest": self.contest, "flip": self.flip.to_dict()}


@dataclass(frozen=True)
class TriggeredSwitch(MalwareStrategy):
    """Switched-intent attack on sessions matching an observable trigger."""

    trigger: Trigger
    flip: FlipRule
    rate: float = 1.0
    contest: str | None = None
    kind: ClassVar[str] = "triggered_switch"

    def __post_init__(self):
        _check_rate("rate", self.rate)

    def bind(self, config):
        contest = self._target(config)
        flip, trigger, rate = self.flip, self.trigger, self.rate

        def decide(s):
            return rate if flip.flippable(s.selections.get(contest)) and trigger(s) else 0.0

        return BoundMalware(contest, flip, decide)

    def to_dict(self):
        return {
            "kind": self.kind, "trigger": self.trigger.to_dict(), "rate": self.rate,
            "contest": self.contest, "flip": self.flip.to_dict(),
        }


@dataclass(frozen=True)
class DownBallot(MalwareStrategy):
    """Switch a fixed budget of votes in a (usually small) contest."""

    contest: str
    budget: int
    flip: FlipRule
    exact: bool = False
    kind: ClassVar[str] = "down_ballot"

    def __post_init__(self):
        if isinstance(self.budget, bool) or not isinstance(self.budget, int) or self.budget < 0:
            raise ConfigError(f"budget must be a nonnegative integer, got {self.budget!r}")

    def bind(self, config):
        contest = self._target(config)
        pool = config.flippable_voters(contest, self.flip)
        if self.budget > pool:
            raise ConfigError(f"budget {self.budget} exceeds the {pool:.0f} flippable voters in {contest!r}")
        q = self.budget / pool if pool > 0 else 0.0
        flip = self.flip
        return BoundMalware(
            contest, flip,
            lambda s: q if flip.flippable(s.selections.get(contest)) else 0.0,
            exact_budget=self.budget if self.exact else None,
        )

    def to_dict(self):
        return {
            "kind": self.kind, "contest": self.contest, "budget": self.budget,
            "exact": self.exact, "flip": self.flip.to_dict(),
        }


@dataclass(frozen=True)
class SecretKnock(MalwareStrategy):
    """Dormant until an accomplice enters the knock, then switches votes.

    A knock arms every machine at the accomplice's location from the next
    time slot on.  Audit scripts never contain the knock.
    """

    knock: str
    accomplice_rate: float
    flip: FlipRule
    rate: float = 1.0
    contest: str | None = None
    kind: ClassVar[str] = "secret_knock"

    def __post_init__(self):
        _check_rate("accomplice_rate", self.accomplice_rate)
        _check_rate("rate", self.rate)

    def bind(self, config):
        contest = self._target(config)
        flip, rate = self.flip, self.rate

        def decide(s):
            return rate if s.armed and flip.flippable(s.selections.get(contest)) else 0.0

        return BoundMalware(contest, flip, decide, accomplice_rate=self.accomplice_rate)

    def to_dict(self):
        return {
            "kind": self.kind, "knock": self.knock, "accomplice_rate": self.accomplice_rate,
            "rate": self.rate, "contest": self.contest, "flip": self.flip.to_dict(),
        }


@dataclass(frozen=True)
class InconsistentBarcode(MalwareStrategy):
    """Print the voter's choice as text but encode a different one in the barcode."""

    rate: float
    flip: FlipRule
    contest: str | None = None
    kind: ClassVar[str] = "inconsistent_barcode"

    def __post_init__(self):
        _check_rate("rate", self.rate)

    def bind(self, config):
        contest = self._target(config)
        q = _flippable_rate(self.rate, self.flip, contest, config, self.kind)
        flip = self.flip
        return BoundMalware(
            contest, flip, lambda s: q if flip.flippable(s.selections.get(contest)) else 0.0, barcode_only=True
        )

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "contest": self.contest, "flip": self.flip.to_dict()}


_KINDS = {cls.kind: cls for cls in (Honest, UniformSwitch, TriggeredSwitch, DownBallot, SecretKnock, InconsistentBarcode)}


def strategy_from_dict(d: Mapping) -> MalwareStrategy:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ConfigError(f"unknown strategy kind {kind!r}; expected one of {sorted(_KINDS)}")
    try:
        if "flip" in d:
            d["flip"] = FlipRule.from_dict(d["flip"])
        if "trigger" in d:
            d["trigger"] = Trigger.from_dict(d["trigger"])
        return _KINDS[kind](**d)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"bad {kind} strategy: {exc}") from None
