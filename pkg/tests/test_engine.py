from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import one_race_config, two_contest_config

from bmdaudit.audit_ops.policy import AdaptivePolicy, StaticPolicy
from bmdaudit.audit_ops.script import generate_script
from bmdaudit.errors import ConfigError, InvalidParameterError
from bmdaudit.world.engine import margin_report, simulate, simulate_trial, trial_script_seed
from bmdaudit.world.strategies import (
    DownBallot,
    FlipRule,
    Honest,
    InconsistentBarcode,
    SecretKnock,
    Trigger,
    TriggeredSwitch,
    UniformSwitch,
)

TO_A = FlipRule("A")


def within(observed, expected, se, k=3.0):
    return abs(observed - expected) <= k * se


class TestSingleTrial:
    def test_conservation(self):
        cfg = one_race_config(voters=5000, detect=0.3)
        for seed in range(5):
            o = simulate_trial(cfg, UniformSwitch(0.2, TO_A), StaticPolicy(n_audits=20), seed)
            assert o.cast + o.abandoned == o.voters == 5000
            assert o.spoils == o.background_spoils + o.noticed
            assert sum(o.tally_intent["race"]) == sum(o.tally_barcode["race"]) == o.cast
            assert o.tampered_cast <= o.tamper_attempts

    def test_honest_is_clean(self):
        cfg = two_contest_config()
        o = simulate_trial(cfg, Honest(), StaticPolicy(n_audits=50), 3)
        assert o.tamper_attempts == o.tampered_cast == o.audit_tampered == 0
        assert not o.catches and not o.emergency
        assert o.tally_intent == o.tally_barcode == o.tally_text
        assert margin_report(o, "gov").shift == 0

    def test_replay_is_identical(self):
        cfg = two_contest_config()
        strat = UniformSwitch(0.05, TO_A)
        runs = [simulate_trial(cfg, strat, StaticPolicy(n_audits=40), 77, index=4, record_events=True)
                for _ in range(2)]
        assert runs[0].to_dict() == runs[1].to_dict()
        assert runs[0].event_records(cfg) == runs[1].event_records(cfg)
        assert runs[0].event_records(cfg)

    def test_trial_script_is_regenerable(self):
        # every session is tampered, so every audit is a catch and the catches list the script
        cfg = one_race_config(voters=2000)
        o = simulate_trial(cfg, UniformSwitch(1.0, TO_A), StaticPolicy(n_audits=30), 5, index=2)
        script = generate_script(cfg.behavior, cfg.fleet_schedule(), 30, trial_script_seed(5, 2))
        assert [(c.minute, c.machine_id) for c in o.catches] == [(e.minute, e.machine_id) for e in script.entries]

    def test_fixed_script_used_unchanged(self):
        cfg = one_race_config(voters=2000)
        script = generate_script(cfg.behavior, cfg.fleet_schedule(), 12, 99)
        for seed in (1, 2):
            o = simulate_trial(cfg, UniformSwitch(1.0, TO_A), script, seed)
            assert [c.machine_id for c in o.catches] == [e.machine_id for e in script.entries]

    def test_single_flip_moves_margin_by_two(self):
        cfg = one_race_config(voters=1000, share_a=0.4, background=0.0)
        o = simulate_trial(cfg, DownBallot("race", 1, FlipRule("A", ("B",)), exact=True), StaticPolicy(n_audits=0), 1)
        m = margin_report(o, "race")
        assert m.pair == ("B", "A") and m.shift == -2 and o.tampered_cast == 1

    def test_margin_shift_percent(self):
        cfg = one_race_config(voters=200_000, share_a=0.4, background=0.0, machines=10)
        o = simulate_trial(cfg, DownBallot("race", 730, FlipRule("A", ("B",)), exact=True),
                           StaticPolicy(n_audits=0), 3)
        m = margin_report(o, "race")
        assert m.shift == -1460
        assert m.shift_percent == pytest.approx(-0.73)

    def test_exact_budget(self):
        cfg = one_race_config(voters=3000, share_a=0.3)
        for seed in range(4):
            o = simulate_trial(cfg, DownBallot("race", 250, TO_A, exact=True), StaticPolicy(n_audits=30), seed)
            # malware cannot tell auditors from voters, so audits draw on the same budget
            assert o.tamper_attempts == o.tampered_cast
            assert o.tamper_attempts + o.audit_tampered == 250

    def test_exact_mode_restrictions(self):
        cfg = one_race_config()
        with pytest.raises(ConfigError):
            simulate_trial(cfg, DownBallot("race", 5, TO_A, exact=True),
                           AdaptivePolicy(n_audits=5, reserve_auditors=5), 1)
        with pytest.raises(ConfigError):
            simulate_trial(one_race_config(reattack_on_retry=True), DownBallot("race", 5, TO_A, exact=True),
                           StaticPolicy(n_audits=5), 1)

    def test_barcode_attack_found_at_canvass(self):
        cfg = one_race_config(voters=2000, detect=0.9, canvass_scan_fraction=1.0)
        o = simulate_trial(cfg, InconsistentBarcode(0.05, TO_A), StaticPolicy(n_audits=0), 8)
        assert o.noticed == 0  # printed text is right, nothing to notice
        assert o.mismatch_cast > 0 and o.canvass_mismatches == o.mismatch_cast
        assert o.tally_text == o.tally_intent != o.tally_barcode
        assert o.emergency
        causes = o.to_dict()["emergency"]["causes"]
        assert causes[-1]["cause"] == "barcode mismatch"

    def test_auditors_scan_the_barcode(self):
        cfg = one_race_config(voters=2000)
        o = simulate_trial(cfg, InconsistentBarcode(0.3, TO_A), StaticPolicy(n_audits=20), 1)
        assert o.audit_tampered > 0 and len(o.catches) == o.audit_tampered and o.emergency

    def test_knock_without_accomplices_is_dormant(self):
        cfg = one_race_config(voters=5000)
        o = simulate_trial(cfg, SecretKnock("42", 0.0, TO_A), StaticPolicy(n_audits=100), 2)
        assert o.tamper_attempts == 0

    def test_knock_never_fires_in_first_slot(self):
        cfg = one_race_config(voters=50_000)
        o = simulate_trial(cfg, SecretKnock("42", 0.01, TO_A), StaticPolicy(n_audits=300), 4)
        assert o.tamper_attempts > 0
        assert all(c.minute > 420 for c in o.catches)

    def test_bad_seed(self):
        with pytest.raises(InvalidParameterError):
            simulate_trial(one_race_config(), Honest(), StaticPolicy(n_audits=1), -1)


class TestStatistics:
    def test_triggered_catch_rate_matches_integration(self):
        cfg = two_contest_config()
        trig = Trigger(min_speed_seconds=600, flags_any=("audio",))
        strat = TriggeredSwitch(trig, TO_A)
        # integrate the per-session probability over the model by hand
        p_trigger = 0.2 * 0.1
        p_flippable = 0.75 * (0.7 * 0.1 + 0.3 * 0.8) + 0.25 * 0.5
        q = p_trigger * p_flippable
        n = 100
        expected = 1 - (1 - q) ** n
        rep = simulate(cfg, strat, StaticPolicy(n_audits=n), 2000, 17)
        assert within(rep.mean("caught"), expected, math.sqrt(expected * (1 - expected) / 2000))
        voters = 4000
        assert within(rep.mean("tamper_attempts"), voters * q, rep.se("tamper_attempts"))

    def test_excess_spoils_track_detect_fraction(self):
        cfg = one_race_config(voters=20_000, detect=0.25)
        rep = simulate(cfg, UniformSwitch(0.02, TO_A), StaticPolicy(n_audits=0), 400, 5)
        assert within(rep.mean("excess_spoils"), 0.25 * 0.02 * 20_000, rep.se("excess_spoils"))
        assert within(rep.mean("background_spoils"), 0.01 * 20_000, rep.se("background_spoils"))

    def test_honest_false_alarms_are_bounded_per_look(self):
        cfg = one_race_config(voters=20_000)
        rep = simulate(cfg, Honest(), StaticPolicy(n_audits=0), 300, 8)
        # 12 looks per trial at a 5% level each; the global rate stays well below certainty
        assert rep.mean("alarm_global") < 0.5
        assert rep.mean("tamper_attempts") == 0

    def test_adaptive_never_exceeds_reserve(self):
        cfg = replace(two_contest_config(), review_detect_probability=0.9)
        pol = AdaptivePolicy(n_audits=10, reserve_auditors=7, audits_per_alarm=5)
        rep = simulate(cfg, UniformSwitch(0.3, TO_A), pol, 30, 3, keep_outcomes=True)
        extras = [o.extra_audits for o in rep.outcomes]
        assert max(extras) <= 7
        assert max(extras) == 7
        assert any(any("reserve exhausted" in w for w in o.warnings) for o in rep.outcomes)


class TestRuns:
    def test_workers_do_not_change_report(self):
        cfg = two_contest_config()
        args = (cfg, UniformSwitch(0.02, TO_A), StaticPolicy(n_audits=30), 12, 31)
        serial = simulate(*args).to_dict()
        parallel = simulate(*args, workers=3).to_dict()
        assert serial == parallel

    def test_reports_are_repeatable(self):
        cfg = one_race_config()
        a = simulate(cfg, UniformSwitch(0.05, TO_A), StaticPolicy(n_audits=20), 50, 2).to_dict()
        b = simulate(cfg, UniformSwitch(0.05, TO_A), StaticPolicy(n_audits=20), 50, 2).to_dict()
        assert a == b

    def test_se_matches_numpy(self):
        cfg = one_race_config()
        rep = simulate(cfg, UniformSwitch(0.05, TO_A), StaticPolicy(n_audits=5), 40, 9)
        spoils = np.array([o.spoils for o in rep.outcomes], dtype=float)
        assert rep.mean("spoils") == pytest.approx(spoils.mean())
        assert rep.se("spoils") == pytest.approx(spoils.std(ddof=1) / math.sqrt(40))

    def test_outcomes_kept_only_for_small_runs(self):
        cfg = one_race_config(voters=100)
        assert len(simulate(cfg, Honest(), StaticPolicy(n_audits=0), 101, 1).outcomes) == 0
        assert len(simulate(cfg, Honest(), StaticPolicy(n_audits=0), 3, 1).outcomes) == 3

    def test_bad_trials(self):
        with pytest.raises(InvalidParameterError):
            simulate(one_race_config(), Honest(), StaticPolicy(n_audits=0), 0, 1)
