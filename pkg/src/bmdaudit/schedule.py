"""Voting-period time grid and the fleet layout that audit scripts are drawn over.

Time is measured in whole minutes from midnight of ``start_date``.  Each
voting day is cut into equal slots between ``open_minute`` and
``close_minute``; slot ``s`` of the election is slot ``s % slots_per_day``
of day ``s // slots_per_day``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from functools import cached_property

from bmdaudit.errors import ConfigError

MINUTES_PER_DAY = 1440


@dataclass(frozen=True)
class Schedule:
    start_date: str = "2020-10-13"
    days: int = 1
    open_minute: int = 7 * 60
    close_minute: int = 19 * 60
    slot_minutes: int = 60
    day_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        try:
            date.fromisoformat(self.start_date)
        except (TypeError, ValueError):
            raise ConfigError(f"start_date must be an ISO date, got {self.start_date!r}") from None
        if self.days < 1:
            raise ConfigError("schedule needs at least one day")
        if not 0 <= self.open_minute < self.close_minute <= MINUTES_PER_DAY:
            raise ConfigError("need 0 <= open_minute < close_minute <= 1440")
        if self.slot_minutes < 1 or (self.close_minute - self.open_minute) % self.slot_minutes:
            raise ConfigError("slot_minutes must evenly divide the opening hours")
        if self.day_weights is not None:
            if len(self.day_weights) != self.days or any(w < 0 for w in self.day_weights):
                raise ConfigError("day_weights needs one nonnegative weight per day")
            if abs(sum(self.day_weights) - 1.0) > 1e-9:
                raise ConfigError("day_weights must sum to 1")

    @property
    def slots_per_day(self) -> int:
        return (self.close_minute - self.open_minute) // self.slot_minutes

    @property
    def n_slots(self) -> int:
        return self.days * self.slots_per_day

    def slot_day(self, slot: int) -> int:
        return slot // self.slots_per_day

    def slot_minute_of_day(self, slot: int) -> int:
        return self.open_minute + (slot % self.slots_per_day) * self.slot_minutes

    def slot_start(self, slot: int) -> int:
        """Absolute minute at which ``slot`` opens."""
        return self.slot_day(slot) * MINUTES_PER_DAY + self.slot_minute_of_day(slot)

    def slot_end(self, slot: int) -> int:
        return self.slot_start(slot) + self.slot_minutes

    def timestamp(self, minute: int) -> datetime:
        return datetime.fromisoformat(self.start_date) + timedelta(minutes=int(minute))

    def day_weight(self, day: int) -> float:
        if self.day_weights is None:
            return 1.0 / self.days
        return self.day_weights[day]

    def to_dict(self) -> dict:
        d = {
            "start_date": self.start_date,
            "days": self.days,
            "open_minute": self.open_minute,
            "close_minute": self.close_minute,
            "slot_minutes": self.slot_minutes,
        }
        if self.day_weights is not None:
            d["day_weights"] = list(self.day_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        if d.get("day_weights") is not None:
            d["day_weights"] = tuple(float(w) for w in d["day_weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad schedule: {exc}") from None


@dataclass(frozen=True)
class FleetSchedule:
    """Where and when audits can happen.

    Attributes:
        schedule: the time grid shared by every location.
        machines: machine ids per location id.
        precincts: ``(precinct_id, location_id, voters)`` triples.
        ballot_styles: contest ids on each precinct's ballot, in ballot order.
        contest_choices: choice labels of every contest.
    """

    schedule: Schedule
    machines: dict[str, tuple[str, ...]]
    precincts: tuple[tuple[str, str, int], ...]
    ballot_styles: dict[str, tuple[str, ...]]
    contest_choices: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @cached_property
    def location_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.machines))

    @cached_property
    def machine_location(self) -> dict[str, str]:
        return {m: loc for loc, ms in self.machines.items() for m in ms}

    def canonical(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "machines": {k: list(v) for k, v in sorted(self.machines.items())},
            "precincts": [list(p) for p in self.precincts],
            "ballot_styles": {k: list(v) for k, v in sorted(self.ballot_styles.items())},
            "contest_choices": {k: list(v) for k, v in sorted(self.contest_choices.items())},
        }
