"""Deterministic audit scripts drawn from the voter model.

Every entry tells an auditor which machine to use, in which time slot, which
selections to enter and how to behave (session length, accessibility
features).  Entries are drawn i.i.d. from the same distribution as real
voter sessions, so malware that only sees the session cannot tell the two
apart.

Sampling order, fixed so that independent generators agree bit for bit
(``rng = numpy.random.Generator(PCG64(SeedSequence(seed)))``):

1. ``(precinct, slot)`` for all entries from the voter-weighted grid;
2. one uniform per entry choosing the preference component;
3. for each contest in sorted id order, one uniform per entry for the choice;
4. the behavior (session length, flags) index;
5. one 62-bit integer per entry that rotates the machine assignment within
   each ``(location, slot)``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from bmdaudit.audit_ops.model import VoterBehaviorModel, canonical_json
from bmdaudit.errors import ConfigError, InvalidParameterError, MalformedRecordError, ScheduleExhaustedError
from bmdaudit.schedule import FleetSchedule

__all__ = [
    "SCRIPT_SCHEMA_VERSION",
    "AuditEntry",
    "AuditScript",
    "ScriptSampler",
    "SampledAudits",
    "generate_script",
    "verify_agreement",
    "seed_from_dice",
    "parse_dice",
]

SCRIPT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AuditEntry:
    machine_id: str
    location_id: str
    slot: int
    minute: int  # absolute minute the session starts
    precinct: str
    selections: tuple[tuple[str, str], ...]
    speed_seconds: int
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "machine_id": self.machine_id,
            "location_id": self.location_id,
            "slot": self.slot,
            "minute": self.minute,
            "precinct": self.precinct,
            "selections": dict(self.selections),
            "speed_seconds": self.speed_seconds,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuditEntry":
        return cls(
            machine_id=str(d["machine_id"]),
            location_id=str(d["location_id"]),
            slot=int(d["slot"]),
            minute=int(d["minute"]),
            precinct=str(d["precinct"]),
            selections=tuple(sorted((str(k), str(v)) for k, v in d["selections"].items())),
            speed_seconds=int(d["speed_seconds"]),
            flags=tuple(sorted(str(f) for f in d.get("flags", ()))),
        )


@dataclass(frozen=True)
class AuditScript:
    entries: tuple[AuditEntry, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    __hash__ = None

    def __post_init__(self):
        keys = [(e.minute, e.machine_id) for e in self.entries]
        if keys != sorted(keys):
            raise ConfigError("audit script entries must be sorted by time")

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCRIPT_SCHEMA_VERSION,
            "metadata": dict(self.metadata),
            "entries": [e.to_dict() for e in self.entries],
        }

    def canonical_bytes(self) -> bytes:
        return (canonical_json(self.to_dict()) + "\n").encode("ascii")

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping) -> "AuditScript":
        if d.get("schema_version") != SCRIPT_SCHEMA_VERSION:
            raise ConfigError(f"unsupported script schema_version {d.get('schema_version')!r}")
        try:
            entries = tuple(AuditEntry.from_dict(e) for e in d["entries"])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed audit entry: {exc!r}") from None
        return cls(entries, dict(d.get("metadata", {})))

    @classmethod
    def loads(cls, text: str | bytes) -> "AuditScript":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"invalid JSON ({exc.msg})", exc.lineno) from None


# -- dice ------------------------------------------------------------------


def parse_dice(text: str) -> tuple[int, ...]:
    """Read die faces from ``"3,1,6"``, ``"3 1 6"`` or ``"316"``."""
    faces = re.findall(r"\S", re.sub(r"[,\s]+", "", str(text)))
    if not faces:
        raise InvalidParameterError("no dice rolls given")
    if any(f not in "123456" for f in faces):
        raise InvalidParameterError(f"dice rolls must be digits 1-6, got {text!r}")
    return tuple(int(f) for f in faces)


def seed_from_dice(rolls: Sequence[int] | str) -> int:
    """Fold die rolls into an integer seed by bijective base-6 numeration.

    ``seed = sum(r_i * 6**(k-1-i))`` with faces 1..6 as digits.  Because no
    digit is zero, distinct roll sequences (including ones of different
    length) always give distinct seeds.
    """
    if isinstance(rolls, str):
        rolls = parse_dice(rolls)
    seed = 0
    for r in rolls:
        if isinstance(r, bool) or r not in (1, 2, 3, 4, 5, 6):
            raise InvalidParameterError(f"die roll must be 1-6, got {r!r}")
        seed = seed * 6 + r
    if not rolls:
        raise InvalidParameterError("no dice rolls given")
    return seed


# -- sampling --------------------------------------------------------------


@dataclass
class SampledAudits:
    """Columnar audit draws; indices refer to the owning :class:`ScriptSampler`."""

    precinct: np.ndarray
    slot: np.ndarray
    component: np.ndarray
    choices: np.ndarray  # (contests, n) choice index, -1 when not on the ballot
    behavior: np.ndarray
    machine: np.ndarray  # global machine index

    def __len__(self) -> int:
        return len(self.precinct)

    def take(self, idx) -> "SampledAudits":
        return SampledAudits(
            self.precinct[idx], self.slot[idx], self.component[idx],
            self.choices[:, idx], self.behavior[idx], self.machine[idx],
        )


class ScriptSampler:
    """Lookup tables for drawing audit sessions from a model and fleet."""

    def __init__(self, model: VoterBehaviorModel, fleet: FleetSchedule):
        self.model = model
        self.fleet = fleet
        sched = fleet.schedule
        self.precinct_ids = tuple(p for p, _, _ in fleet.precincts)
        missing = [p for p in self.precinct_ids if p not in model.preferences]
        if missing:
            raise ConfigError(f"behavior model lacks precinct(s): {', '.join(missing)}")
        self.location_ids = fleet.location_ids
        loc_index = {loc: i for i, loc in enumerate(self.location_ids)}
        self.precinct_location = np.array([loc_index[loc] for _, loc, _ in fleet.precincts], dtype=np.int64)
        voters = np.array([v for _, _, v in fleet.precincts], dtype=float)
        if voters.sum() <= 0:
            raise ConfigError("no voters to model audits on")

        self.machine_ids: list[str] = []
        offsets, counts = [], []
        for loc in self.location_ids:
            offsets.append(len(self.machine_ids))
            counts.append(len(fleet.machines[loc]))
            self.machine_ids.extend(fleet.machines[loc])
        self.machine_offset = np.array(offsets, dtype=np.int64)
        self.machine_count = np.array(counts, dtype=np.int64)
        self.machine_location = np.repeat(np.arange(len(self.location_ids)), counts)

        self.n_slots = sched.n_slots
        self.slot_probs = self._slot_distribution()
        self.precinct_probs = voters / voters.sum()
        self.grid_probs = np.outer(self.precinct_probs, self.slot_probs).ravel()
        self.slot_start = np.array([sched.slot_start(s) for s in range(self.n_slots)], dtype=np.int64)

        self.contest_ids = tuple(sorted(fleet.contest_choices))
        P = len(self.precinct_ids)
        comps = [model.preferences[p] for p in self.precinct_ids]
        self.n_components = np.array([len(c) for c in comps])
        cmax = int(self.n_components.max())
        self.component_cum = np.full((P, cmax), 2.0)
        for i, cs in enumerate(comps):
            self.component_cum[i, : len(cs)] = np.cumsum([c.weight for c in cs])
            self.component_cum[i, len(cs) - 1] = 1.0
        self.choice_cum = []
        self.on_ballot = []
        for contest in self.contest_ids:
            labels = fleet.contest_choices[contest]
            cum = np.full((P, cmax, len(labels)), 2.0)
            on = np.zeros(P, dtype=bool)
            for i, p in enumerate(self.precinct_ids):
                if contest not in fleet.ballot_styles[p]:
                    continue
                on[i] = True
                for j, comp in enumerate(comps[i]):
                    if contest not in comp.choices:
                        raise ConfigError(f"model for precinct {p!r} lacks contest {contest!r}")
                    dist = comp.choices[contest]
                    unknown = set(dist) - set(labels)
                    if unknown:
                        raise ConfigError(f"model choice(s) {sorted(unknown)} not on contest {contest!r}")
                    probs = [dist.get(lab, 0.0) for lab in labels]
                    row = np.cumsum(probs)
                    last = max(k for k, pr in enumerate(probs) if pr > 0)
                    row[last:] = 1.0
                    cum[i, j] = row
            self.choice_cum.append(cum)
            self.on_ballot.append(on)
        self.behaviors = model.behaviors
        self.behavior_probs = np.array([b.prob for b in self.behaviors])
        self.behavior_probs = self.behavior_probs / self.behavior_probs.sum()

    def _slot_distribution(self) -> np.ndarray:
        sched = self.fleet.schedule
        weights = np.zeros(sched.n_slots)
        hour_w = {h: w / 60.0 for h, w in self.model.arrival_profile}
        for s in range(sched.n_slots):
            start = sched.slot_minute_of_day(s)
            mass = sum(hour_w.get((start + k) // 60 % 24, 0.0) for k in range(sched.slot_minutes))
            weights[s] = mass * sched.day_weight(sched.slot_day(s))
        if weights.sum() <= 0:
            raise ConfigError("arrival profile puts no voters inside opening hours")
        return weights / weights.sum()

    def contest_index(self, contest: str) -> int:
        return self.contest_ids.index(contest)

    def sample(
        self,
        rng: np.random.Generator,
        n: int,
        grid_mask: np.ndarray | None = None,
        booked: set[tuple[int, int]] | None = None,
    ) -> SampledAudits:
        """Draw ``n`` audit sessions.

        Args:
            grid_mask: optional boolean ``(precincts, slots)`` array; draws are
                restricted to (renormalized) ``True`` cells.
            booked: ``(machine, slot)`` pairs already taken by other entries.
        """
        if n < 0:
            raise InvalidParameterError("audit count must be nonnegative")
        P = len(self.precinct_ids)
        probs = self.grid_probs
        if grid_mask is not None:
            probs = np.where(grid_mask.ravel(), probs, 0.0)
            if probs.sum() <= 0:
                raise ScheduleExhaustedError("no eligible time slots remain for extra audits")
            probs = probs / probs.sum()
        cell = rng.choice(P * self.n_slots, size=n, p=probs)
        precinct = cell // self.n_slots
        slot = cell % self.n_slots

        u = rng.random(n)
        component = (u[:, None] >= self.component_cum[precinct]).sum(axis=1)
        choices = np.full((len(self.contest_ids), n), -1, dtype=np.int64)
        for j in range(len(self.contest_ids)):
            u = rng.random(n)
            idx = (u[:, None] >= self.choice_cum[j][precinct, component]).sum(axis=1)
            choices[j] = np.where(self.on_ballot[j][precinct], idx, -1)
        behavior = rng.choice(len(self.behaviors), size=n, p=self.behavior_probs)
        rot = rng.integers(0, 1 << 62, size=n)
        machine = self._assign_machines(precinct, slot, rot, booked)
        return SampledAudits(precinct, slot, component, choices, behavior, machine)

    def _assign_machines(self, precinct, slot, rot, booked) -> np.ndarray:
        n = len(precinct)
        loc = self.precinct_location[precinct]
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if booked:
            out = np.empty(n, dtype=np.int64)
            taken = set(booked)
            for i in range(n):
                l, s = int(loc[i]), int(slot[i])
                off, cnt = int(self.machine_offset[l]), int(self.machine_count[l])
                free = [m for m in range(off, off + cnt) if (m, s) not in taken]
                if not free:
                    raise ScheduleExhaustedError(
                        f"every machine at {self.location_ids[l]!r} is booked in slot {s}"
                    )
                m = free[int(rot[i]) % len(free)]
                taken.add((m, s))
                out[i] = m
            return out
        key = loc * self.n_slots + slot
        order = np.argsort(key, kind="stable")
        sk = key[order]
        new_group = np.r_[True, sk[1:] != sk[:-1]]
        group_start = np.maximum.accumulate(np.where(new_group, np.arange(n), 0))
        rank = np.arange(n) - group_start
        lo = loc[order]
        cnt = self.machine_count[lo]
        over = rank >= cnt
        if over.any():
            i = int(np.argmax(over))
            raise ScheduleExhaustedError(
                f"more audits than machines at {self.location_ids[lo[i]]!r} in slot {int(slot[order][i])}"
            )
        first = rot[order][group_start]
        local = (first % cnt + rank) % cnt
        out = np.empty(n, dtype=np.int64)
        out[order] = self.machine_offset[lo] + local
        return out

    def entries(self, draws: SampledAudits) -> tuple[AuditEntry, ...]:
        """Materialize draws as time-ordered :class:`AuditEntry` records."""
        out = []
        precinct = draws.precinct.tolist()
        slot = draws.slot.tolist()
        beh = draws.behavior.tolist()
        mach = draws.machine.tolist()
        choices = draws.choices.tolist()
        for i in range(len(precinct)):
            p = precinct[i]
            b = self.behaviors[beh[i]]
            sel = tuple(
                (c, self.fleet.contest_choices[c][choices[j][i]])
                for j, c in enumerate(self.contest_ids) if choices[j][i] >= 0
            )
            out.append(AuditEntry(
                machine_id=self.machine_ids[mach[i]],
                location_id=self.location_ids[int(self.machine_location[mach[i]])],
                slot=slot[i],
                minute=int(self.slot_start[slot[i]]),
                precinct=self.precinct_ids[p],
                selections=sel,
                speed_seconds=b.speed_seconds,
                flags=tuple(sorted(b.flags)),
            ))
        out.sort(key=lambda e: (e.minute, e.machine_id))
        return tuple(out)


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def generate_script(
    model: VoterBehaviorModel,
    fleet: FleetSchedule,
    n_audits: int,
    seed: int,
    *,
    sampler: ScriptSampler | None = None,
) -> AuditScript:
    """Draw ``n_audits`` audit sessions; a pure function of its arguments."""
    if isinstance(n_audits, bool) or not isinstance(n_audits, int) or n_audits < 0:
        raise InvalidParameterError(f"n_audits must be a nonnegative integer, got {n_audits!r}")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise InvalidParameterError(f"seed must be a nonnegative integer, got {seed!r}")
    if n_audits > 0 and fleet.schedule.n_slots == 0:
        raise ScheduleExhaustedError("empty schedule")
    sampler = sampler or ScriptSampler(model, fleet)
    draws = sampler.sample(_generator(seed), n_audits)
    metadata = {
        "model_hash": model.hash,
        "fleet_hash": hashlib.sha256(canonical_json(fleet.canonical()).encode()).hexdigest(),
        "seed": str(seed),
        "n_audits": n_audits,
    }
    return AuditScript(sampler.entries(draws), metadata)


def verify_agreement(scripts: Iterable[AuditScript | bytes]) -> bool:
    """True iff every script serializes to the same canonical bytes.

    Disagreement between independently generated scripts is evidence that a
    generator has been tampered with.
    """
    blobs = [s if isinstance(s, (bytes, bytearray)) else s.canonical_bytes() for s in scripts]
    if len(blobs) < 2:
        raise InvalidParameterError("agreement needs at least two scripts")
    return all(b == blobs[0] for b in blobs[1:])
