"""Poisson thresholds for spoiled-ballot counts and a streaming alarm monitor.

The background number of spoiled ballots in an election of ``N`` ballots with
expected spoil rate ``r`` is modelled as Poisson with mean ``mu = N * r``.  A
count is anomalous when it exceeds the one-sided ``confidence`` quantile of
that distribution.

The monitor re-tests after every event without any sequential-testing
correction.  Repeated looks at a growing stream therefore raise the
false-alarm rate above ``1 - confidence``; callers who need a controlled
family-wise rate must adjust ``confidence`` themselves.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from statistics import NormalDist
from typing import Any, Iterable, Iterator, Mapping

from bmdaudit.errors import InvalidParameterError, MalformedRecordError, OutOfOrderError

__all__ = [
    "MU_LIMIT",
    "poisson_quantile",
    "exceeds_quantile",
    "SpoilageModel",
    "SpoilageThreshold",
    "spoilage_threshold",
    "margin_delta",
    "undetectable_attack_budget",
    "SpoilEvent",
    "AlarmState",
    "AlarmTransition",
    "SpoilageMonitor",
    "monitor_ingest",
    "parse_events",
]

#: Largest Poisson mean accepted by :func:`poisson_quantile`.
MU_LIMIT = 1e7

# terms smaller than this fraction of the running mass are dropped
_TAIL_EPS = 1e-20
_SMALL_MU = 30.0


def _check_quantile_args(q: float, mu: float) -> None:
    if not isinstance(q, (int, float)) or math.isnan(q) or not 0 < q < 1:
        raise InvalidParameterError(f"q must lie in (0, 1), got {q!r}")
    if not isinstance(mu, (int, float)) or math.isnan(mu) or mu <= 0:
        raise InvalidParameterError(f"mu must be positive, got {mu!r}")
    if mu > MU_LIMIT:
        raise InvalidParameterError(f"mu={mu!r} exceeds the supported limit {MU_LIMIT:g}")


def poisson_quantile(q: float, mu: float) -> int:
    """Smallest ``k`` with ``P(X <= k) >= q`` for ``X ~ Poisson(mu)``.

    For small means the pmf recurrence ``pmf(k+1) = pmf(k) * mu / (k+1)`` is
    summed from ``k = 0``.  For larger means ``exp(-mu)`` underflows, so the
    recurrence is run in both directions from the mode using pmf ratios and
    normalized by the total mass; no factorial or ``exp(-mu)`` is formed.
    """
    _check_quantile_args(q, mu)
    return _quantile(float(q), float(mu))


@lru_cache(maxsize=1 << 16)
def _quantile(q: float, mu: float) -> int:
    if mu < _SMALL_MU:
        term = math.exp(-mu)
        cdf = term
        k = 0
        while cdf < q:
            k += 1
            term *= mu / k
            if term < _TAIL_EPS * cdf:
                break  # q sits within rounding of 1
            cdf += term
        return k

    mode = math.floor(mu)
    below = []  # ratios pmf(k)/pmf(mode) for k = mode-1, mode-2, ...
    r = 1.0
    k = mode
    mass = 1.0
    while k > 0:
        r *= k / mu
        k -= 1
        below.append(r)
        mass += r
        if r < _TAIL_EPS * mass:
            break
    above = []
    r = 1.0
    k = mode
    while True:
        k += 1
        r *= mu / k
        above.append(r)
        mass += r
        if r < _TAIL_EPS * mass:
            break

    target = q * mass
    cdf = 0.0
    lowest = mode - len(below)
    for i, ratio in enumerate(reversed(below)):
        cdf += ratio
        if cdf >= target:
            return lowest + i
    cdf += 1.0
    if cdf >= target:
        return mode
    for i, ratio in enumerate(above):
        cdf += ratio
        if cdf >= target:
            return mode + 1 + i
    return mode + len(above)


def _cornish_fisher(q: float, mu: float) -> float:
    z = NormalDist().inv_cdf(q)
    skew = mu ** -0.5
    w = z + (z * z - 1) * skew / 6 + (z ** 3 - 3 * z) / (24 * mu) - (2 * z ** 3 - 5 * z) * skew * skew / 36
    return mu + math.sqrt(mu) * w - 0.5


def exceeds_quantile(count: int, q: float, mu: float) -> bool:
    """``count > poisson_quantile(q, mu)``, skipping the exact sum when far away.

    Inside ``0.5 <= q <= 0.999`` and ``mu >= 5`` the Cornish-Fisher estimate
    is within one unit of the exact quantile, so counts more than three units
    from it are decided directly.
    """
    _check_quantile_args(q, mu)
    if mu >= 5 and 0.5 <= q <= 0.999:
        approx = _cornish_fisher(q, mu)
        if count > approx + 3:
            return True
        if count < approx - 3:
            return False
    return count > _quantile(float(q), float(mu))


@dataclass(frozen=True)
class SpoilageModel:
    """Election size, background spoil rate and voter detection fraction."""

    election_size: int
    expected_rate: float
    detection_fraction: float
    confidence: float = 0.95

    def __post_init__(self):
        if isinstance(self.election_size, bool) or not isinstance(self.election_size, int) or self.election_size <= 0:
            raise InvalidParameterError(f"election_size must be a positive integer, got {self.election_size!r}")
        if not 0 < self.expected_rate < 1:
            raise InvalidParameterError(f"expected_rate must lie in (0, 1), got {self.expected_rate!r}")
        if not 0 < self.detection_fraction <= 1:
            raise InvalidParameterError(f"detection_fraction must lie in (0, 1], got {self.detection_fraction!r}")
        if not 0 < self.confidence < 1:
            raise InvalidParameterError(f"confidence must lie in (0, 1), got {self.confidence!r}")
        if self.mean > MU_LIMIT:
            raise InvalidParameterError("expected spoil count exceeds the supported Poisson range")

    @property
    def mean(self) -> float:
        return self.election_size * self.expected_rate


@dataclass(frozen=True)
class SpoilageThreshold:
    mean: float
    threshold: int
    excess: int


def spoilage_threshold(m: SpoilageModel) -> SpoilageThreshold:
    mean = m.mean
    threshold = poisson_quantile(m.confidence, mean)
    return SpoilageThreshold(mean=mean, threshold=threshold, excess=threshold - round(mean))


def margin_delta(m: SpoilageModel) -> float:
    """Largest margin change, in percent, an attack can make below the threshold.

    Each undetected flip moves one vote from one candidate to another, which
    is where the factor of two comes from.
    """
    t = spoilage_threshold(m)
    return 200.0 * (t.threshold - t.mean) / (m.election_size * m.detection_fraction)


def undetectable_attack_budget(m: SpoilageModel) -> int:
    """Largest tamper count whose expected extra spoils stay within the excess."""
    excess = spoilage_threshold(m).excess
    d = m.detection_fraction
    budget = math.floor(excess / d)
    slack = 1e-9 * max(1.0, excess)
    while (budget + 1) * d <= excess + slack:
        budget += 1
    while budget > 0 and budget * d > excess + slack:
        budget -= 1
    return budget


# -- streaming monitor ------------------------------------------------------


@dataclass(frozen=True)
class SpoilEvent:
    timestamp: Any
    location_id: str
    machine_id: str

    def to_record(self) -> dict:
        ts = self.timestamp.isoformat() if isinstance(self.timestamp, datetime) else self.timestamp
        return {"timestamp": ts, "location_id": self.location_id, "machine_id": self.machine_id}


@dataclass(frozen=True)
class AlarmState:
    global_alarm: bool = False
    location_alarms: frozenset = frozenset()

    @property
    def any(self) -> bool:
        return self.global_alarm or bool(self.location_alarms)


@dataclass(frozen=True)
class AlarmTransition:
    timestamp: Any
    scope: str  # "global" or "location"
    location_id: str | None
    active: bool
    count: int
    threshold: int
    expected: float

    def to_record(self) -> dict:
        ts = self.timestamp.isoformat() if isinstance(self.timestamp, datetime) else self.timestamp
        return {
            "timestamp": ts,
            "scope": self.scope,
            "location_id": self.location_id,
            "state": "on" if self.active else "off",
            "count": self.count,
            "threshold": self.threshold,
            "expected": self.expected,
        }


@dataclass
class SpoilageMonitor:
    """Running spoil counts per location with Poisson alarms.

    Ballots cast so far are supplied separately through :meth:`set_cast`
    (per location) or :meth:`set_total_cast` (whole election).  A location is
    only tested once its cast count is known and positive; the global test
    needs a positive total.

    A monitor has a single writer.  :meth:`snapshot` returns an immutable
    copy that may be handed to other readers.
    """

    expected_rate: float
    confidence: float = 0.95
    location_rates: Mapping[str, float] = field(default_factory=dict)
    keep_events: bool = False

    def __post_init__(self):
        if not 0 < self.expected_rate < 1:
            raise InvalidParameterError(f"expected_rate must lie in (0, 1), got {self.expected_rate!r}")
        if not 0 < self.confidence < 1:
            raise InvalidParameterError(f"confidence must lie in (0, 1), got {self.confidence!r}")
        for loc, rate in self.location_rates.items():
            if not 0 < rate < 1:
                raise InvalidParameterError(f"rate for {loc!r} must lie in (0, 1), got {rate!r}")
        self.counts: dict[str, int] = {}
        self.total = 0
        self.cast: dict[str, int] = {}
        self._total_cast: int | None = None
        self.events: list[SpoilEvent] = []
        self.transitions: list[AlarmTransition] = []
        self._last_ts = None
        self._global = False
        self._alarmed: set[str] = set()

    # feeds

    def set_cast(self, location_id: str, cast: int) -> None:
        if cast < 0:
            raise InvalidParameterError("cast count must be nonnegative")
        self.cast[location_id] = int(cast)

    def set_total_cast(self, cast: int | None) -> None:
        if cast is not None and cast < 0:
            raise InvalidParameterError("cast count must be nonnegative")
        self._total_cast = cast

    @property
    def total_cast(self) -> int:
        if self._total_cast is not None:
            return self._total_cast
        return sum(self.cast.values())

    def _check_order(self, timestamp) -> None:
        if self._last_ts is not None and timestamp < self._last_ts:
            raise OutOfOrderError(f"event at {timestamp!r} precedes previous event at {self._last_ts!r}")
        self._last_ts = timestamp

    def add_spoils(self, location_id: str, count: int, timestamp=None) -> None:
        """Record ``count`` spoils at once without re-evaluating alarms."""
        if count < 0:
            raise InvalidParameterError("spoil count must be nonnegative")
        if timestamp is not None:
            self._check_order(timestamp)
        if count:
            self.counts[location_id] = self.counts.get(location_id, 0) + count
            self.total += count

    def ingest(self, event: SpoilEvent) -> AlarmState:
        self._check_order(event.timestamp)
        self.counts[event.location_id] = self.counts.get(event.location_id, 0) + 1
        self.total += 1
        if self.keep_events:
            self.events.append(event)
        return self.evaluate(event.timestamp)

    # thresholds

    def location_expected(self, location_id: str) -> float:
        return self.location_rates.get(location_id, self.expected_rate) * self.cast.get(location_id, 0)

    def global_expected(self) -> float:
        known = sum(self.cast.values())
        mu = math.fsum(self.location_expected(loc) for loc in sorted(self.cast))
        return mu + self.expected_rate * max(0, self.total_cast - known)

    def threshold(self, mu: float) -> int:
        return poisson_quantile(self.confidence, mu)

    def evaluate(self, timestamp=None) -> AlarmState:
        """Recompute every alarm against the current counts and cast feed."""
        for loc in sorted(set(self.counts) | self._alarmed):
            mu = self.location_expected(loc)
            count = self.counts.get(loc, 0)
            active = mu > 0 and exceeds_quantile(count, self.confidence, mu)
            if active != (loc in self._alarmed):
                (self._alarmed.add if active else self._alarmed.discard)(loc)
                self.transitions.append(
                    AlarmTransition(timestamp, "location", loc, active, count, self.threshold(mu) if mu > 0 else 0, mu)
                )
        mu = self.global_expected()
        active = mu > 0 and exceeds_quantile(self.total, self.confidence, mu)
        if active != self._global:
            self._global = active
            self.transitions.append(
                AlarmTransition(timestamp, "global", None, active, self.total, self.threshold(mu) if mu > 0 else 0, mu)
            )
        return self.state

    @property
    def state(self) -> AlarmState:
        return AlarmState(self._global, frozenset(self._alarmed))

    def snapshot(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "total": self.total,
            "cast": dict(sorted(self.cast.items())),
            "total_cast": self.total_cast,
            "global_alarm": self._global,
            "location_alarms": sorted(self._alarmed),
        }


def monitor_ingest(monitor: SpoilageMonitor, event: SpoilEvent) -> AlarmState:
    """Functional alias for :meth:`SpoilageMonitor.ingest`."""
    return monitor.ingest(event)


def _parse_timestamp(value, line: int):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return value
    if not isinstance(value, str):
        raise MalformedRecordError(f"timestamp must be an ISO 8601 string, got {value!r}", line)
    try:
        return datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise MalformedRecordError(f"bad timestamp {value!r}", line) from None


def parse_events(lines: Iterable[str]) -> Iterator[SpoilEvent]:
    """Parse line-delimited JSON spoil events; blank lines are skipped."""
    for lineno, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise MalformedRecordError("record must be a JSON object", lineno)
        missing = [k for k in ("timestamp", "location_id", "machine_id") if k not in rec]
        if missing:
            raise MalformedRecordError(f"missing field(s): {', '.join(missing)}", lineno)
        yield SpoilEvent(_parse_timestamp(rec["timestamp"], lineno), str(rec["location_id"]), str(rec["machine_id"]))
