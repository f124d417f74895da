"""Counts-level Monte Carlo engine.

Voters within a precinct are exchangeable, so a trial does not walk voters
one by one.  It draws how many voters fall into each cell
``(precinct, slot, preference component, target-contest choice)`` and then
pushes whole cells through the session flow with binomial draws:

1. a background share of voters spoils a ballot through their own mistake
   (never tampered) and starts over with one attempt fewer;
2. every remaining intent session is tampered with the strategy's
   probability for that cell, averaged over the machine-observable behavior
   distribution;
3. a tampered printout is noticed with ``review_detect_probability`` (never
   for barcode-only tampering, whose printed text is right).  Noticing means
   a spoil and a retry; a spoil on the last allowed attempt means the voter
   leaves without casting.  Retries are only attacked again when
   ``reattack_on_retry`` is set.

Audit sessions are drawn per trial with :class:`ScriptSampler` and are
tampered with the same per-session probability as voters in the same slot,
behavior and selection, because malware only sees an
:class:`ObservableSession`.  A tampered audit is always caught.

Seeds: trial ``i`` of a run with master seed ``m`` uses
``SeedSequence(m, spawn_key=(i, j))`` for stream ``j``: 0 audit script,
1 audit tampering, 2 policy amendments, 3 voters, 4 event timestamps.  The
script stream seed is exposed as :func:`trial_script_seed` so the audits of
any trial can be regenerated with :func:`generate_script`.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from bmdaudit.audit_ops.policy import (
    AdaptivePolicy,
    OfficialPolicy,
    StaticPolicy,
    apply_policy,
    emergency_state,
)
from bmdaudit.audit_ops.script import AuditScript, SampledAudits, ScriptSampler
from bmdaudit.errors import BmdAuditError, ConfigError, InvalidParameterError
from bmdaudit.spoilage import SpoilageMonitor, SpoilEvent
from bmdaudit.world.config import ElectionConfig
from bmdaudit.world.strategies import BoundMalware, MalwareStrategy, ObservableSession

__all__ = [
    "CatchEvent",
    "TrialOutcome",
    "MarginReport",
    "SimulationReport",
    "CompiledElection",
    "TrialError",
    "compile_election",
    "trial_script_seed",
    "simulate_trial",
    "simulate",
    "margin_report",
    "METRICS",
]

STREAM_SCRIPT, STREAM_AUDIT, STREAM_POLICY, STREAM_VOTERS, STREAM_EVENTS = range(5)


class TrialError(BmdAuditError):
    def __init__(self, index: int, exc: BaseException):
        super().__init__(f"trial {index}: {exc}")
        self.index = index


def _stream(master_seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(index, stream))))


def trial_script_seed(master_seed: int, index: int) -> int:
    """Integer seed of trial ``index``'s audit script."""
    words = np.random.SeedSequence(master_seed, spawn_key=(index, STREAM_SCRIPT)).generate_state(2, np.uint64)
    return (int(words[0]) << 64) | int(words[1])


@dataclass(frozen=True)
class CatchEvent:
    minute: int
    machine_id: str
    location_id: str
    precinct: str

    def to_record(self) -> dict:
        return {"minute": self.minute, "machine_id": self.machine_id,
                "location_id": self.location_id, "precinct": self.precinct}


@dataclass(frozen=True)
class TrialOutcome:
    """Result of one simulated election.

    Tallies count cast ballots only, per contest and choice, as read from the
    barcode and as printed in text; ``tally_intent`` is what voters meant.

    ``alarm_global`` and ``alarmed_locations`` record alarms raised at any
    slot boundary during the day.  The ``*_at_close`` fields hold the
    monitor state after the final count, which is the single test a
    post-election threshold comparison makes.
    """

    index: int
    voters: int
    cast: int
    abandoned: int
    spoils: int
    background_spoils: int
    noticed: int  # spoils caused by voters noticing tampering
    tamper_attempts: int
    tampered_cast: int
    mismatch_cast: int
    canvass_mismatches: int
    audits: int
    extra_audits: int
    audit_tampered: int
    catches: tuple[CatchEvent, ...]
    alarm_global: bool
    alarmed_locations: tuple[str, ...]
    first_alarm_minute: int | None
    alarm_at_close: bool
    alarmed_at_close: tuple[str, ...]
    tally_intent: Mapping[str, tuple[int, ...]]
    tally_barcode: Mapping[str, tuple[int, ...]]
    tally_text: Mapping[str, tuple[int, ...]]
    choices: Mapping[str, tuple[str, ...]]
    target_contest: str | None
    warnings: tuple[str, ...] = ()
    spoil_events: tuple[SpoilEvent, ...] | None = None
    alarm_records: tuple[dict, ...] | None = None

    __hash__ = None

    @property
    def caught(self) -> bool:
        return bool(self.catches)

    @property
    def emergency(self) -> bool:
        return bool(self.catches) or self.canvass_mismatches > 0

    @property
    def alarm_any(self) -> bool:
        return self.alarm_global or bool(self.alarmed_locations)

    def to_dict(self) -> dict:
        em = emergency_state(self)
        d = {
            "index": self.index,
            "voters": self.voters,
            "cast": self.cast,
            "abandoned": self.abandoned,
            "spoils": self.spoils,
            "background_spoils": self.background_spoils,
            "noticed": self.noticed,
            "tamper_attempts": self.tamper_attempts,
            "tampered_cast": self.tampered_cast,
            "mismatch_cast": self.mismatch_cast,
            "canvass_mismatches": self.canvass_mismatches,
            "audits": self.audits,
            "extra_audits": self.extra_audits,
            "audit_tampered": self.audit_tampered,
            "catches": [c.to_record() for c in self.catches],
            "alarm_global": self.alarm_global,
            "alarmed_locations": list(self.alarmed_locations),
            "first_alarm_minute": self.first_alarm_minute,
            "alarm_at_close": self.alarm_at_close,
            "alarmed_at_close": list(self.alarmed_at_close),
            "emergency": {"triggered": em.triggered, "causes": list(em.causes)},
            "tally_intent": {c: list(v) for c, v in sorted(self.tally_intent.items())},
            "tally_barcode": {c: list(v) for c, v in sorted(self.tally_barcode.items())},
            "tally_text": {c: list(v) for c, v in sorted(self.tally_text.items())},
            "warnings": list(self.warnings),
        }
        if self.target_contest is not None:
            d["margin"] = margin_report(self, self.target_contest).to_dict()
        return d

    def event_records(self, config: ElectionConfig) -> list[dict]:
        """Line-delimited event log: spoils, alarm transitions and catches, by time."""
        sched = config.schedule
        out = []
        for e in self.spoil_events or ():
            out.append((e.timestamp, 0, dict(e.to_record(), type="spoil")))
        for a in self.alarm_records or ():
            out.append((a["timestamp"], 1, dict(a, type="alarm")))
        for c in self.catches:
            out.append((c.minute, 2, dict(c.to_record(), type="catch")))
        out.sort(key=lambda t: (t[0], t[1]))
        recs = []
        for minute, _, rec in out:
            rec["timestamp"] = sched.timestamp(minute).isoformat()
            rec.pop("minute", None)
            recs.append(rec)
        return recs


@dataclass(frozen=True)
class MarginReport:
    contest: str
    pair: tuple[str, str]
    true_margin: int
    reported_margin: int
    shift: int
    cast: int

    @property
    def shift_percent(self) -> float:
        return 100.0 * self.shift / self.cast if self.cast else 0.0

    def to_dict(self) -> dict:
        return {"contest": self.contest, "pair": list(self.pair), "true_margin": self.true_margin,
                "reported_margin": self.reported_margin, "shift": self.shift}


def margin_report(outcome: TrialOutcome, contest: str) -> MarginReport:
    """Margin between the two leading choices (by voter intent), true and as reported.

    The reported count is the barcode tally, which is what tabulators read.
    """
    if contest not in outcome.tally_intent:
        raise ConfigError(f"unknown contest {contest!r}")
    intent = outcome.tally_intent[contest]
    reported = outcome.tally_barcode[contest]
    order = sorted(range(len(intent)), key=lambda k: (-intent[k], k))
    a, b = order[0], order[1]
    true_margin = intent[a] - intent[b]
    rep_margin = reported[a] - reported[b]
    labels = outcome.choices[contest]
    return MarginReport(contest, (labels[a], labels[b]), true_margin, rep_margin,
                        rep_margin - true_margin, sum(intent))


# -- compilation ---------------------------------------------------------------


@dataclass
class CompiledElection:
    """Lookup tables shared by every trial of one (config, strategy, policy)."""

    config: ElectionConfig
    bound: BoundMalware
    policy: OfficialPolicy
    sampler: ScriptSampler
    voters: np.ndarray          # (P,)
    cell_pvals: np.ndarray      # (P, S*C*X)
    shape: tuple[int, int, int, int]
    qcell: np.ndarray           # (S, X, 2) voter tamper probability, last axis armed
    qtab: np.ndarray            # (S, B, X, 2) per-behavior tamper probability
    target_col: int | None      # row of the target contest in sampler choice arrays
    to_index: int
    location_of: np.ndarray     # (P,) location index
    comp_probs: dict[str, np.ndarray]  # contest -> (P, C, K) for the tally draws
    fixed_draws: SampledAudits | None
    q_unarmed: np.ndarray       # (P, S, C, X) voter tamper probability before any knock
    monitor_rates: dict[str, float]


def compile_election(config: ElectionConfig, strategy: MalwareStrategy, policy: OfficialPolicy) -> CompiledElection:
    bound = strategy.bind(config)
    fleet = config.fleet_schedule()
    sampler = ScriptSampler(config.behavior, fleet)
    sched = config.schedule
    P, S = len(sampler.precinct_ids), sampler.n_slots
    comps = [config.behavior.preferences[p] for p in sampler.precinct_ids]
    C = max(len(c) for c in comps)

    if bound.exact_budget is not None:
        if isinstance(policy, AdaptivePolicy):
            raise ConfigError("exact-budget tampering cannot be combined with an adaptive policy")
        if config.reattack_on_retry:
            raise ConfigError("exact-budget tampering cannot be combined with reattack_on_retry")

    if bound.contest is None:
        labels: tuple[str, ...] = ()
        X = 1
        target_col = None
    else:
        labels = config.contest_map[bound.contest].choices
        X = len(labels) + 1  # last column: contest not on this ballot
        target_col = sampler.contest_index(bound.contest)

    # pi[p, c, x]
    pi = np.zeros((P, C, X))
    weights = np.zeros((P, C))
    for i, cs in enumerate(comps):
        on = bound.contest is not None and bound.contest in config.ballot_style(sampler.precinct_ids[i])
        for j, comp in enumerate(cs):
            weights[i, j] = comp.weight
            if on:
                dist = comp.choices[bound.contest]
                pi[i, j, : X - 1] = [dist.get(lab, 0.0) for lab in labels]
            else:
                pi[i, j, X - 1] = 1.0
    cell = sampler.slot_probs[None, :, None, None] * weights[:, None, :, None] * pi[:, None, :, :]
    cell_pvals = cell.reshape(P, -1)
    cell_pvals = cell_pvals / cell_pvals.sum(axis=1, keepdims=True)

    behaviors = sampler.behaviors
    qtab = np.zeros((S, len(behaviors), X, 2))
    if bound.contest is not None:
        for s in range(S):
            day, mod = sched.slot_day(s), sched.slot_minute_of_day(s)
            for b, beh in enumerate(behaviors):
                for x in range(X):
                    sel = {bound.contest: labels[x]} if x < X - 1 else {}
                    for armed in (0, 1):
                        q = bound.probability(
                            ObservableSession(day, mod, beh.speed_seconds, beh.flags, sel, bool(armed))
                        )
                        if not 0 <= q <= 1:
                            raise ConfigError(f"strategy returned tamper probability {q!r}")
                        qtab[s, b, x, armed] = q
    qcell = np.clip(np.einsum("b,sbxa->sxa", sampler.behavior_probs, qtab), 0.0, 1.0)

    comp_probs = {}
    for contest in sampler.contest_ids:
        if contest == bound.contest:
            continue
        ch = config.contest_map[contest].choices
        arr = np.full((P, C, len(ch)), 1.0 / len(ch))
        for i, cs in enumerate(comps):
            if contest in config.ballot_style(sampler.precinct_ids[i]):
                for j, comp in enumerate(cs):
                    arr[i, j] = [comp.choices[contest].get(lab, 0.0) for lab in ch]
        comp_probs[contest] = arr

    by_id = {p.id: p.voters for p in config.precincts}
    fixed = None
    if policy.script is not None:
        fixed = _draws_from_script(policy.script, sampler, config)

    return CompiledElection(
        config=config, bound=bound, policy=policy, sampler=sampler,
        voters=np.array([by_id[pid] for pid in sampler.precinct_ids], dtype=np.int64),
        cell_pvals=cell_pvals, shape=(P, S, C, X), qcell=qcell, qtab=qtab,
        target_col=target_col, to_index=labels.index(bound.flip.to) if bound.flip is not None else -1,
        location_of=sampler.precinct_location,
        comp_probs=comp_probs, fixed_draws=fixed,
        q_unarmed=np.ascontiguousarray(np.broadcast_to(qcell[None, :, None, :, 0], (P, S, C, X))),
        monitor_rates=dict(config.monitor.location_rates),
    )


def _draws_from_script(script: AuditScript, sampler: ScriptSampler, config: ElectionConfig) -> SampledAudits:
    """Index form of a fixed script; its behaviors must come from the model's support."""
    pidx = {p: i for i, p in enumerate(sampler.precinct_ids)}
    midx = {m: i for i, m in enumerate(sampler.machine_ids)}
    bidx = {(b.speed_seconds, tuple(sorted(b.flags))): i for i, b in enumerate(sampler.behaviors)}
    slot_of_start = {int(m): s for s, m in enumerate(sampler.slot_start)}
    n = len(script.entries)
    out = SampledAudits(
        np.zeros(n, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64),
        np.full((len(sampler.contest_ids), n), -1, np.int64), np.zeros(n, np.int64), np.zeros(n, np.int64),
    )
    for i, e in enumerate(script.entries):
        try:
            out.precinct[i] = pidx[e.precinct]
            out.machine[i] = midx[e.machine_id]
            out.behavior[i] = bidx[(e.speed_seconds, tuple(sorted(e.flags)))]
        except KeyError as exc:
            raise ConfigError(f"audit script entry {i} does not match the election: unknown {exc}") from None
        if e.slot not in range(sampler.n_slots) or slot_of_start.get(e.minute) != e.slot:
            raise ConfigError(f"audit script entry {i} has a slot outside the schedule")
        out.slot[i] = e.slot
        for contest, choice in e.selections:
            if contest not in config.contest_map or choice not in config.contest_map[contest].choices:
                raise ConfigError(f"audit script entry {i} selects unknown {contest}={choice}")
            out.choices[sampler.contest_index(contest), i] = config.contest_map[contest].choices.index(choice)
    return out


# -- one trial -------------------------------------------------------------------


def _empty_draws(n_contests: int) -> SampledAudits:
    z = np.zeros(0, dtype=np.int64)
    return SampledAudits(z, z, z, np.zeros((n_contests, 0), dtype=np.int64), z, z)


def _audit_x(ce: CompiledElection, draws: SampledAudits) -> np.ndarray:
    X = ce.shape[3]
    if ce.target_col is None:
        return np.zeros(len(draws), dtype=np.int64)
    x = draws.choices[ce.target_col]
    return np.where(x < 0, X - 1, x)


def _run_trial(ce: CompiledElection, index: int, master_seed: int, record_events: bool) -> TrialOutcome:
    cfg, bound, sampler = ce.config, ce.bound, ce.sampler
    sched = cfg.schedule
    P, S, C, X = ce.shape
    L = len(sampler.location_ids)
    M = cfg.max_spoil_attempts
    d = 0.0 if bound.barcode_only else cfg.review_detect_probability
    b = cfg.background_spoil_rate
    rng_v = _stream(master_seed, index, STREAM_VOTERS)
    rng_a = None
    warnings: list[str] = []

    # base audits
    if ce.fixed_draws is not None:
        base = ce.fixed_draws
    elif ce.policy.n_audits == 0:
        base = _empty_draws(len(sampler.contest_ids))
    else:
        seed = trial_script_seed(master_seed, index)
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        base = sampler.sample(gen, ce.policy.n_audits)

    # voters per cell
    N = rng_v.multinomial(ce.voters, ce.cell_pvals).reshape(P, S, C, X)

    armed = np.zeros((L, S), dtype=bool)
    if bound.accomplice_rate > 0:
        acc = rng_v.binomial(N.sum(axis=(2, 3)), bound.accomplice_rate)
        per_loc = np.zeros((L, S), dtype=np.int64)
        np.add.at(per_loc, ce.location_of, acc)
        seen = np.cumsum(per_loc > 0, axis=1)
        armed[:, 1:] = seen[:, :-1] > 0
        armed_ps = armed[ce.location_of]  # (P, S)
        q = np.where(armed_ps[:, :, None, None], ce.qcell[None, :, None, :, 1], ce.qcell[None, :, None, :, 0])
        q = np.broadcast_to(q, (P, S, C, X))
    else:
        q = ce.q_unarmed
    q_retry = q if cfg.reattack_on_retry else None

    bg = rng_v.binomial(N, b) if b > 0 else np.zeros_like(N)
    groups = [(N - bg, M), (bg, M - 1)]

    # exact budget: split tampering over flippable voter sessions and flippable audits
    exact_t: list[np.ndarray | None] = [None, None]
    audit_hits = None
    if bound.exact_budget is not None:
        flip_mask = q > 0
        colors = []
        for g, r in groups:
            colors.append(g[flip_mask] if r >= 1 else np.zeros(int(flip_mask.sum()), np.int64))
        ax = _audit_x(ce, base)
        aq = ce.qtab[base.slot, base.behavior, ax, armed[sampler.machine_location[base.machine], base.slot].astype(int)]
        audit_flip = np.flatnonzero(aq > 0)
        pool = np.concatenate(colors + [np.array([len(audit_flip)])]).astype(np.int64)
        budget = bound.exact_budget
        if budget > pool.sum():
            warnings.append(f"tamper budget {budget} exceeds the {int(pool.sum())} flippable sessions; capped")
            budget = int(pool.sum())
        picks = rng_v.multivariate_hypergeometric(pool, budget) if budget else np.zeros_like(pool)
        k = int(flip_mask.sum())
        for gi in range(2):
            t = np.zeros_like(N)
            t[flip_mask] = picks[gi * k:(gi + 1) * k]
            exact_t[gi] = t
        h = int(picks[-1])
        audit_hits = np.zeros(len(base), dtype=bool)
        if h:
            rng_a = _stream(master_seed, index, STREAM_AUDIT)
            audit_hits[rng_a.choice(audit_flip, size=h, replace=False)] = True

    cast = np.zeros_like(N)
    tampered_cast = np.zeros_like(N)
    spoils = bg.copy()
    attempts = 0
    noticed = 0
    abandoned = 0
    for gi, (g, r) in enumerate(groups):
        if r <= 0:
            abandoned += int(g.sum())
            continue
        t = exact_t[gi] if exact_t[gi] is not None else rng_v.binomial(g, q)
        k = rng_v.binomial(t, d) if d > 0 else np.zeros_like(t)
        attempts += int(t.sum())
        noticed += int(k.sum())
        spoils += k
        tampered_cast += t - k
        cast += g - k
        pending, rr = k, r - 1
        while rr >= 1 and pending.any():
            if q_retry is None:
                cast += pending
                pending = np.zeros_like(pending)
                break
            t2 = rng_v.binomial(pending, q_retry)
            k2 = rng_v.binomial(t2, d) if d > 0 else np.zeros_like(t2)
            attempts += int(t2.sum())
            noticed += int(k2.sum())
            spoils += k2
            tampered_cast += t2 - k2
            cast += pending - k2
            pending, rr = k2, rr - 1
        abandoned += int(pending.sum())

    # tallies
    tally_intent: dict[str, tuple[int, ...]] = {}
    tally_barcode: dict[str, tuple[int, ...]] = {}
    tally_text: dict[str, tuple[int, ...]] = {}
    choices = {c.id: c.choices for c in cfg.contests}
    mismatch_cast = 0
    if bound.contest is not None:
        by_x = cast.sum(axis=(0, 1, 2))[: X - 1]
        moved = tampered_cast.sum(axis=(0, 1, 2))[: X - 1]
        intent = by_x.copy()
        barcode = by_x - moved
        barcode[ce.to_index] += int(moved.sum())
        tally_intent[bound.contest] = tuple(int(v) for v in intent)
        tally_barcode[bound.contest] = tuple(int(v) for v in barcode)
        if bound.barcode_only:
            tally_text[bound.contest] = tally_intent[bound.contest]
            mismatch_cast = int(moved.sum())
        else:
            tally_text[bound.contest] = tally_barcode[bound.contest]
    cast_pc = cast.sum(axis=(1, 3))
    for contest in sampler.contest_ids:
        if contest == bound.contest:
            continue
        on = sampler.on_ballot[sampler.contest_index(contest)]
        n = np.where(on[:, None], cast_pc, 0)
        counts = rng_v.multinomial(n, ce.comp_probs[contest]).sum(axis=(0, 1))
        t = tuple(int(v) for v in counts)
        tally_intent[contest] = tally_barcode[contest] = tally_text[contest] = t
    canvass = int(rng_v.binomial(mismatch_cast, cfg.canvass_scan_fraction)) if mismatch_cast else 0

    # monitor, slot by slot; adaptive amendments follow new location alarms
    spoil_ls = np.zeros((L, S), dtype=np.int64)
    cast_ls = np.zeros((L, S), dtype=np.int64)
    np.add.at(spoil_ls, ce.location_of, spoils.sum(axis=(2, 3)))
    np.add.at(cast_ls, ce.location_of, cast.sum(axis=(2, 3)))
    cum_cast = np.cumsum(cast_ls, axis=1)
    monitor = SpoilageMonitor(cfg.monitor_rate, cfg.monitor.confidence, ce.monitor_rates)
    alarmed: set[str] = set()
    ever_global = False
    first_alarm = None
    adaptive = isinstance(ce.policy, AdaptivePolicy) and ce.policy.reserve_auditors > 0
    extra: list[SampledAudits] = []
    used = 0
    handled: set[str] = set()
    booked = set(zip(base.machine.tolist(), base.slot.tolist())) if adaptive else None
    rng_p = _stream(master_seed, index, STREAM_POLICY) if adaptive else None
    loc_ids = sampler.location_ids
    for s in range(S):
        for li in range(L):
            if cum_cast[li, s]:
                monitor.set_cast(loc_ids[li], int(cum_cast[li, s]))
            if spoil_ls[li, s]:
                monitor.add_spoils(loc_ids[li], int(spoil_ls[li, s]))
        state = monitor.evaluate(int(sched.slot_end(s)))
        if state.any:
            ever_global |= state.global_alarm
            alarmed |= state.location_alarms
            if first_alarm is None:
                first_alarm = int(sched.slot_end(s))
        if adaptive and s + 1 < S and state.location_alarms - handled:
            amend = apply_policy(ce.policy, state, sampler, s + 1, rng_p, handled=handled, used=used,
                                 booked=booked, materialize=False)
            handled |= state.location_alarms
            used = amend.used
            warnings.extend(amend.warnings)
            if amend.draws is not None and len(amend.draws):
                extra.append(amend.draws)
                booked.update(zip(amend.draws.machine.tolist(), amend.draws.slot.tolist()))

    # audits
    draws = base
    if extra:
        draws = SampledAudits(
            *(np.concatenate([getattr(base, f)] + [getattr(e, f) for e in extra]) for f in ("precinct", "slot", "component")),
            np.concatenate([base.choices] + [e.choices for e in extra], axis=1),
            np.concatenate([base.behavior] + [e.behavior for e in extra]),
            np.concatenate([base.machine] + [e.machine for e in extra]),
        )
    if audit_hits is not None:
        hit = audit_hits
    elif len(draws) == 0:
        hit = np.zeros(0, dtype=bool)
    else:
        rng_a = _stream(master_seed, index, STREAM_AUDIT)
        ax = _audit_x(ce, draws)
        a_armed = armed[sampler.machine_location[draws.machine], draws.slot].astype(np.int64)
        aq = ce.qtab[draws.slot, draws.behavior, ax, a_armed]
        hit = rng_a.random(len(draws)) < aq
    catches = []
    for i in np.flatnonzero(hit).tolist():
        m = int(draws.machine[i])
        catches.append(CatchEvent(
            int(sampler.slot_start[draws.slot[i]]), sampler.machine_ids[m],
            loc_ids[int(sampler.machine_location[m])], sampler.precinct_ids[int(draws.precinct[i])],
        ))
    catches.sort(key=lambda c: (c.minute, c.machine_id))

    spoil_events = None
    alarm_records = None
    if record_events:
        rng_e = _stream(master_seed, index, STREAM_EVENTS)
        evs = []
        for li in range(L):
            machines = cfg.locations[[loc.id for loc in cfg.locations].index(loc_ids[li])].machine_ids
            for s in range(S):
                n = int(spoil_ls[li, s])
                if not n:
                    continue
                minutes = sched.slot_start(s) + rng_e.integers(0, sched.slot_minutes, size=n)
                mach = rng_e.integers(0, len(machines), size=n)
                evs.extend(SpoilEvent(int(t), loc_ids[li], machines[int(j)]) for t, j in zip(minutes, mach))
        evs.sort(key=lambda e: (e.timestamp, e.location_id, e.machine_id))
        spoil_events = tuple(evs)
        alarm_records = tuple(
            {"minute": t.timestamp, "timestamp": t.timestamp, "scope": t.scope, "location_id": t.location_id,
             "active": t.active, "count": t.count, "threshold": t.threshold, "expected": t.expected}
            for t in monitor.transitions
        )

    return TrialOutcome(
        index=index,
        voters=int(N.sum()),
        cast=int(cast.sum()),
        abandoned=abandoned,
        spoils=int(spoils.sum()),
        background_spoils=int(bg.sum()),
        noticed=noticed,
        tamper_attempts=attempts,
        tampered_cast=int(tampered_cast.sum()),
        mismatch_cast=mismatch_cast,
        canvass_mismatches=canvass,
        audits=len(draws),
        extra_audits=len(draws) - len(base),
        audit_tampered=len(catches),
        catches=tuple(catches),
        alarm_global=ever_global,
        alarmed_locations=tuple(sorted(alarmed)),
        first_alarm_minute=first_alarm,
        alarm_at_close=state.global_alarm,
        alarmed_at_close=tuple(sorted(state.location_alarms)),
        tally_intent=tally_intent,
        tally_barcode=tally_barcode,
        tally_text=tally_text,
        choices=choices,
        target_contest=bound.contest,
        warnings=tuple(warnings),
        spoil_events=spoil_events,
        alarm_records=alarm_records,
    )


def simulate_trial(
    config: ElectionConfig,
    strategy: MalwareStrategy,
    audit_plan: AuditScript | OfficialPolicy,
    seed: int,
    *,
    index: int = 0,
    record_events: bool = False,
) -> TrialOutcome:
    """Run one election; a pure function of its arguments.

    ``audit_plan`` is either a fixed script or a policy.  ``(seed, index)``
    select the random streams as described in the module docstring.
    """
    policy = audit_plan if isinstance(audit_plan, OfficialPolicy) else StaticPolicy(script=audit_plan)
    _check_seed(seed)
    ce = compile_election(config, strategy, policy)
    return _run_trial(ce, index, seed, record_events)


def _check_seed(seed: int) -> None:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise InvalidParameterError(f"seed must be a nonnegative integer, got {seed!r}")


# -- many trials -------------------------------------------------------------------

METRICS = (
    "voters", "cast", "abandoned", "spoils", "background_spoils", "noticed", "excess_spoils",
    "tamper_attempts", "tampered_cast", "mismatch_cast", "canvass_mismatches", "audits",
    "extra_audits", "audit_tampered", "caught", "emergency", "alarm_global", "alarm_any",
    "alarm_at_close", "margin_shift",
)


def _metric_values(o: TrialOutcome) -> tuple[int, ...]:
    shift = margin_report(o, o.target_contest).shift if o.target_contest is not None else 0
    return (
        o.voters, o.cast, o.abandoned, o.spoils, o.background_spoils, o.noticed,
        o.spoils - o.background_spoils,
        o.tamper_attempts, o.tampered_cast, o.mismatch_cast, o.canvass_mismatches, o.audits,
        o.extra_audits, o.audit_tampered, int(o.caught), int(o.emergency), int(o.alarm_global),
        int(o.alarm_any), int(o.alarm_at_close), shift,
    )


@dataclass
class _Accumulator:
    n: int = 0
    sums: list[int] = field(default_factory=lambda: [0] * len(METRICS))
    sumsq: list[int] = field(default_factory=lambda: [0] * len(METRICS))
    outcomes: list[TrialOutcome] = field(default_factory=list)

    def add(self, o: TrialOutcome, keep: bool) -> None:
        self.n += 1
        for k, v in enumerate(_metric_values(o)):
            self.sums[k] += v
            self.sumsq[k] += v * v
        if keep:
            self.outcomes.append(o)

    def merge(self, other: "_Accumulator") -> None:
        self.n += other.n
        self.sums = [a + b for a, b in zip(self.sums, other.sums)]
        self.sumsq = [a + b for a, b in zip(self.sumsq, other.sumsq)]
        self.outcomes.extend(other.outcomes)


@dataclass(frozen=True)
class SimulationReport:
    """Aggregate over trials.

    ``sums`` and ``sumsq`` hold exact integer totals per metric, so merging
    partial results in any order gives the same report.  ``mean`` and ``se``
    (standard error of the mean) are derived from them.
    """

    trials: int
    master_seed: int
    sums: Mapping[str, int]
    sumsq: Mapping[str, int]
    outcomes: tuple[TrialOutcome, ...] = ()
    meta: Mapping[str, Any] = field(default_factory=dict)

    __hash__ = None

    def mean(self, metric: str) -> float:
        return self.sums[metric] / self.trials

    def se(self, metric: str) -> float:
        n = self.trials
        if n < 2:
            return 0.0
        # exact integer arithmetic for the centred sum of squares
        ss = self.sumsq[metric] * n - self.sums[metric] ** 2
        return math.sqrt(ss / (n * (n - 1))) / math.sqrt(n)

    def frequency(self, metric: str) -> float:
        return self.mean(metric)

    @property
    def detection_frequency(self) -> float:
        """Share of trials that ended in an emergency."""
        return self.mean("emergency")

    def summary(self) -> dict[str, dict[str, float]]:
        return {m: {"mean": self.mean(m), "se": self.se(m)} for m in METRICS}

    def to_dict(self, include_outcomes: bool = True) -> dict:
        d = {
            "trials": self.trials,
            "master_seed": str(self.master_seed),
            "meta": dict(self.meta),
            "sums": dict(self.sums),
            "sumsq": {k: str(v) for k, v in self.sumsq.items()},
            "summary": self.summary(),
        }
        if include_outcomes:
            d["outcomes"] = [o.to_dict() for o in self.outcomes]
        return d


def _run_chunk(args) -> _Accumulator:
    config, strategy, policy, indices, master_seed, keep, record = args
    ce = compile_election(config, strategy, policy)
    acc = _Accumulator()
    for i in indices:
        try:
            acc.add(_run_trial(ce, i, master_seed, record), keep)
        except BmdAuditError as exc:
            raise TrialError(i, exc) from exc
    return acc


def simulate(
    config: ElectionConfig,
    strategy: MalwareStrategy,
    policy: OfficialPolicy,
    trials: int,
    master_seed: int,
    *,
    workers: int = 1,
    keep_outcomes: bool | None = None,
    record_events: bool = False,
) -> SimulationReport:
    """Run ``trials`` independent elections and aggregate them.

    Trial ``i`` is seeded from ``(master_seed, i)`` whatever the worker
    count, and aggregates are integer sums, so ``workers`` never changes the
    report.  Outcomes are kept by default only for runs of at most 100
    trials.
    """
    if isinstance(trials, bool) or not isinstance(trials, int) or trials < 1:
        raise InvalidParameterError(f"trials must be a positive integer, got {trials!r}")
    _check_seed(master_seed)
    if keep_outcomes is None:
        keep_outcomes = trials <= 100
    workers = max(1, min(int(workers or 1), trials))
    if workers == 1:
        acc = _run_chunk((config, strategy, policy, range(trials), master_seed, keep_outcomes, record_events))
    else:
        # validate in the parent so configuration errors surface directly
        compile_election(config, strategy, policy)
        chunks = [range(k, trials, workers) for k in range(workers)]
        acc = _Accumulator()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, [
                (config, strategy, policy, c, master_seed, keep_outcomes, record_events) for c in chunks
            ]):
                acc.merge(part)
        acc.outcomes.sort(key=lambda o: o.index)
    return SimulationReport(
        trials=acc.n,
        master_seed=int(master_seed),
        sums=dict(zip(METRICS, acc.sums)),
        sumsq=dict(zip(METRICS, acc.sumsq)),
        outcomes=tuple(acc.outcomes),
        meta={"strategy": strategy.to_dict()["kind"], "policy": policy.kind},
    )


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
