from __future__ import annotations

from types import SimpleNamespace

import pytest
from conftest import two_contest_config

from bmdaudit.audit_ops.policy import (
    AUDIT_MISMATCH,
    BARCODE_MISMATCH,
    AdaptivePolicy,
    StaticPolicy,
    allocate_reserve,
    apply_policy,
    emergency_state,
    policy_from_dict,
)
from bmdaudit.audit_ops.script import ScriptSampler
from bmdaudit.errors import ConfigError, ReserveExceededError
from bmdaudit.spoilage import AlarmState
from bmdaudit.world.engine import CatchEvent


@pytest.fixture(scope="module")
def sampler():
    cfg = two_contest_config()
    return ScriptSampler(cfg.behavior, cfg.fleet_schedule())


def alarms(*locs, global_alarm=False):
    return AlarmState(global_alarm, frozenset(locs))


def test_no_alarms_no_change(sampler):
    pol = AdaptivePolicy(n_audits=10, reserve_auditors=10)
    amend = apply_policy(pol, alarms(), sampler, 0, 1)
    assert len(amend) == 0 and amend.used == 0 and amend.allocation == {}


def test_static_policy_ignores_alarms(sampler):
    amend = apply_policy(StaticPolicy(n_audits=5), alarms("east"), sampler, 0, 1)
    assert len(amend) == 0


def test_one_alarm_gets_its_share(sampler):
    pol = AdaptivePolicy(n_audits=10, reserve_auditors=10, audits_per_alarm=5)
    amend = apply_policy(pol, alarms("east"), sampler, 3, 7)
    assert amend.allocation == {"east": 5}
    assert len(amend.entries) == 5 and amend.used == 5
    assert all(e.location_id == "east" and e.slot >= 3 for e in amend.entries)
    assert amend.warnings == ()


def test_handled_locations_are_skipped(sampler):
    pol = AdaptivePolicy(n_audits=10, reserve_auditors=10, audits_per_alarm=5)
    amend = apply_policy(pol, alarms("east", "west"), sampler, 0, 7, handled={"east"}, used=5)
    assert amend.allocation == {"west": 5} and amend.used == 10


def test_reserve_capping_warns():
    pol = AdaptivePolicy(n_audits=1, reserve_auditors=7, audits_per_alarm=5)
    alloc, warnings = allocate_reserve(pol, ["west", "east"])
    assert alloc == {"east": 5, "west": 2}
    assert len(warnings) == 1 and "reserve exhausted" in warnings[0] and "west" in warnings[0]
    alloc, warnings = allocate_reserve(pol, ["north"], used=7)
    assert alloc == {} and "north received 0 of 5" in warnings[0]


def test_overspent_reserve():
    with pytest.raises(ReserveExceededError):
        allocate_reserve(AdaptivePolicy(n_audits=1, reserve_auditors=3), ["a"], used=4)


def test_amendment_avoids_booked_cells(sampler):
    pol = AdaptivePolicy(n_audits=0, reserve_auditors=50, audits_per_alarm=50)
    booked = {(m, s) for m in range(0, 59) for s in range(sampler.n_slots)}
    amend = apply_policy(pol, alarms("east"), sampler, 0, 3, booked=booked)
    # one free machine per slot and four busy hours: the draw cannot fit
    assert amend.allocation == {} and any("no room" in w for w in amend.warnings)


def test_same_seed_same_amendment(sampler):
    pol = AdaptivePolicy(n_audits=0, reserve_auditors=10, audits_per_alarm=4)
    a = apply_policy(pol, alarms("east", "west"), sampler, 2, 11)
    b = apply_policy(pol, alarms("east", "west"), sampler, 2, 11)
    assert a.entries == b.entries


def test_policy_validation_and_dicts():
    with pytest.raises(ConfigError):
        StaticPolicy()
    with pytest.raises(ConfigError):
        AdaptivePolicy(n_audits=3, reserve_auditors=-1)
    with pytest.raises(ConfigError):
        policy_from_dict({"kind": "psychic"})
    pol = AdaptivePolicy(n_audits=3, reserve_auditors=9, audits_per_alarm=2)
    again = policy_from_dict(pol.to_dict())
    assert again == pol and again.base_audits == 3


class TestEmergency:
    def test_quiet(self):
        state = emergency_state(SimpleNamespace(catches=[], canvass_mismatches=0))
        assert not state.triggered and state.causes == ()

    def test_catch(self):
        c = CatchEvent(500, "m1", "L1", "p1")
        state = emergency_state(SimpleNamespace(catches=[c], canvass_mismatches=0))
        assert state.triggered
        assert state.causes[0]["cause"] == AUDIT_MISMATCH and state.causes[0]["machine_id"] == "m1"

    def test_barcode_mismatch(self):
        state = emergency_state(SimpleNamespace(catches=[], canvass_mismatches=3))
        assert state.triggered
        assert state.causes == ({"cause": BARCODE_MISMATCH, "count": 3, "stage": "canvass"},)
