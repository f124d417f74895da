"""Official audit policies and the emergency trigger.

A static policy runs its base script and nothing else.  An adaptive policy
keeps ``reserve_auditors`` spare audits and, when the spoilage monitor
raises an alarm at a location, sends ``audits_per_alarm`` of them there for
the rest of the voting period.  Locations are served in sorted id order
once the reserve runs short; whatever does not fit is dropped with a
warning.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, ClassVar, Iterable, Mapping

import numpy as np

from bmdaudit.audit_ops.script import AuditEntry, AuditScript, SampledAudits, ScriptSampler
from bmdaudit.errors import ConfigError, ReserveExceededError, ScheduleExhaustedError
from bmdaudit.spoilage import AlarmState

__all__ = [
    "OfficialPolicy",
    "StaticPolicy",
    "AdaptivePolicy",
    "ScriptAmendment",
    "EmergencyState",
    "AUDIT_MISMATCH",
    "BARCODE_MISMATCH",
    "allocate_reserve",
    "apply_policy",
    "emergency_state",
    "policy_from_dict",
]

AUDIT_MISMATCH = "audit mismatch"
BARCODE_MISMATCH = "barcode mismatch"


class OfficialPolicy:
    """Base for policies.

    Either ``script`` (used unchanged in every trial) or ``n_audits`` (a fresh
    script per trial, seeded from the trial seed) sets the base audits.
    """

    kind: ClassVar[str] = ""
    n_audits: int | None
    script: AuditScript | None

    def _check_base(self) -> None:
        if (self.script is None) == (self.n_audits is None):
            raise ConfigError("policy needs exactly one of 'script' or 'n_audits'")
        if self.n_audits is not None and (
            isinstance(self.n_audits, bool) or not isinstance(self.n_audits, int) or self.n_audits < 0
        ):
            raise ConfigError(f"n_audits must be a nonnegative integer, got {self.n_audits!r}")

    @property
    def base_audits(self) -> int:
        return len(self.script) if self.script is not None else int(self.n_audits)

    def _base_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.script is not None:
            d["script"] = self.script.to_dict()
        else:
            d["n_audits"] = self.n_audits
        return d

    def to_dict(self) -> dict:
        return self._base_dict()


@dataclass(frozen=True)
class StaticPolicy(OfficialPolicy):
    n_audits: int | None = None
    script: AuditScript | None = None
    kind: ClassVar[str] = "static"

    __hash__ = None

    def __post_init__(self):
        self._check_base()


@dataclass(frozen=True)
class AdaptivePolicy(OfficialPolicy):
    n_audits: int | None = None
    script: AuditScript | None = None
    reserve_auditors: int = 0
    audits_per_alarm: int = 5
    kind: ClassVar[str] = "adaptive"

    __hash__ = None

    def __post_init__(self):
        self._check_base()
        for name in ("reserve_auditors", "audits_per_alarm"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"{name} must be a nonnegative integer, got {v!r}")

    def to_dict(self) -> dict:
        d = self._base_dict()
        d["reserve_auditors"] = self.reserve_auditors
        d["audits_per_alarm"] = self.audits_per_alarm
        return d


def policy_from_dict(d: Mapping) -> OfficialPolicy:
    d = dict(d)
    kind = d.pop("kind", "static")
    cls = {"static": StaticPolicy, "adaptive": AdaptivePolicy}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown policy kind {kind!r}; expected 'static' or 'adaptive'")
    if "script" in d and d["script"] is not None:
        d["script"] = AuditScript.from_dict(d["script"])
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} policy: {exc}") from None


@dataclass(frozen=True)
class ScriptAmendment:
    """Extra audits added in response to alarms.

    Attributes:
        allocation: extra audits per location id.
        entries: the new script entries, time-ordered.
        draws: the same entries in sampler-index form.
        used: reserve consumed after this amendment (cumulative).
        warnings: human-readable notes about capped or unplaceable audits.
    """

    allocation: Mapping[str, int] = field(default_factory=dict)
    entries: tuple[AuditEntry, ...] = ()
    draws: SampledAudits | None = None
    used: int = 0
    warnings: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.entries) if self.draws is None else len(self.draws)


def allocate_reserve(
    policy: OfficialPolicy, locations: Iterable[str], used: int = 0
) -> tuple[dict[str, int], list[str]]:
    """Split what is left of the reserve over newly alarmed locations."""
    if not isinstance(policy, AdaptivePolicy):
        return {}, []
    if used > policy.reserve_auditors:
        raise ReserveExceededError(f"{used} reserve audits used but only {policy.reserve_auditors} exist")
    left = policy.reserve_auditors - used
    allocation: dict[str, int] = {}
    warnings: list[str] = []
    for loc in sorted(set(locations)):
        want = policy.audits_per_alarm
        got = min(want, left)
        if got:
            allocation[loc] = got
            left -= got
        if got < want:
            warnings.append(f"reserve exhausted: {loc} received {got} of {want} extra audits")
    return allocation, warnings


def apply_policy(
    policy: OfficialPolicy,
    alarms: AlarmState,
    sampler: ScriptSampler,
    from_slot: int,
    rng: np.random.Generator | int,
    *,
    handled: Iterable[str] = (),
    used: int = 0,
    booked: set[tuple[int, int]] | None = None,
    materialize: bool = True,
) -> ScriptAmendment:
    """Compute the audits a policy adds in response to ``alarms``.

    Args:
        policy: the official policy in force.
        alarms: current monitor state.
        sampler: audit sampler for the election's model and fleet.
        from_slot: first time slot still open for new audits.
        rng: generator or integer seed for the extra draws.
        handled: locations that already received extra audits.
        used: reserve already spent.
        booked: ``(machine index, slot)`` pairs already in the script.
        materialize: also build :class:`AuditEntry` records.

    Returns:
        The amendment; empty for static policies and when nothing new alarmed.
    """
    if not isinstance(policy, AdaptivePolicy):
        return ScriptAmendment(used=used)
    handled = set(handled)
    fresh = sorted(loc for loc in alarms.location_alarms if loc not in handled)
    allocation, warnings = allocate_reserve(policy, fresh, used)
    if not allocation:
        return ScriptAmendment(used=used, warnings=tuple(warnings))
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng))))
    booked = set(booked or ())
    slots_open = np.arange(sampler.n_slots) >= from_slot
    parts: list[SampledAudits] = []
    placed: dict[str, int] = {}
    for loc, count in allocation.items():
        if loc not in sampler.location_ids:
            warnings.append(f"alarmed location {loc} is not in the fleet")
            continue
        li = sampler.location_ids.index(loc)
        mask = (sampler.precinct_location == li)[:, None] & slots_open[None, :]
        try:
            draws = sampler.sample(rng, count, grid_mask=mask, booked=booked)
        except ScheduleExhaustedError as exc:
            warnings.append(f"no room for extra audits at {loc}: {exc}")
            continue
        booked.update(zip(draws.machine.tolist(), draws.slot.tolist()))
        parts.append(draws)
        placed[loc] = count
    if not parts:
        return ScriptAmendment(used=used, warnings=tuple(warnings))
    draws = SampledAudits(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in ("precinct", "slot", "component")),
        np.concatenate([p.choices for p in parts], axis=1),
        np.concatenate([p.behavior for p in parts]),
        np.concatenate([p.machine for p in parts]),
    )
    entries = sampler.entries(draws) if materialize else ()
    return ScriptAmendment(placed, entries, draws, used + sum(placed.values()), tuple(warnings))


@dataclass(frozen=True)
class EmergencyState:
    triggered: bool
    causes: tuple[dict, ...] = ()


def emergency_state(outcome: Any) -> EmergencyState:
    """Declare an emergency on any auditor catch or observed barcode mismatch.

    ``outcome`` needs ``catches`` (records with ``to_record()``) and
    ``canvass_mismatches`` (count of mismatched ballots seen at canvass).
    """
    causes = [dict(c.to_record(), cause=AUDIT_MISMATCH) for c in outcome.catches]
    seen = int(getattr(outcome, "canvass_mismatches", 0))
    if seen:
        causes.append({"cause": BARCODE_MISMATCH, "count": seen, "stage": "canvass"})
    return EmergencyState(bool(causes), tuple(causes))
