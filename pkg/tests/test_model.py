from __future__ import annotations

import io

import pytest

from bmdaudit.audit_ops.model import (
    DEFAULT_SPEED_HISTOGRAM,
    PreferenceComponent,
    VoterBehaviorModel,
    fit_model,
)
from bmdaudit.errors import ConfigError, EmptyDataError, MalformedRecordError


def test_straight_ticket_precinct_is_degenerate():
    m = fit_model("precinct,contest,choice,count\np1,*,gov=A;sen=A,500\n")
    (comp,) = m.preferences["p1"]
    assert comp.weight == 1.0
    assert comp.choices == {"gov": {"A": 1.0}, "sen": {"A": 1.0}}
    assert m.choice_probability("p1", "gov", "B") == 0.0


def test_whole_ballot_mixture():
    m = fit_model(
        "precinct,contest,choice,count\n"
        "p1,*,gov=A;sen=A,60\n"
        "p1,*,gov=B;sen=B,40\n"
        "p2,*,gov=A;sen=A,40\n"
        "p2,*,gov=B;sen=B,60\n"
    )
    assert [c.weight for c in m.preferences["p1"]] == [0.6, 0.4]
    assert [c.weight for c in m.preferences["p2"]] == [0.4, 0.6]
    assert m.choice_probability("p1", "sen", "A") == pytest.approx(0.6)


def test_per_contest_rows_are_mle():
    m = fit_model(io.StringIO(
        "precinct,contest,choice,count\n"
        "p1,gov,A,30\np1,gov,B,70\np1,prop,yes,1\np1,prop,no,3\n"
    ))
    (comp,) = m.preferences["p1"]
    assert comp.choices["gov"] == {"A": 0.3, "B": 0.7}
    assert comp.choices["prop"] == {"no": 0.75, "yes": 0.25}


def test_default_timing_is_flagged():
    m = fit_model("precinct,contest,choice,count\np1,gov,A,1\n")
    assert m.metadata["timing_source"] == "default"
    assert m.speed_histogram == DEFAULT_SPEED_HISTOGRAM


def test_timing_from_event_log():
    timing = (
        "machine,session_start,session_end,flags\n"
        "m1,2020-11-03T07:00:00,2020-11-03T07:03:00,\n"
        "m1,2020-11-03T08:00:00,2020-11-03T08:03:30,audio\n"
        "m2,2020-11-03T08:10:00,2020-11-03T08:20:00,audio;large_font\n"
        "m2,2020-11-03T09:00:00,2020-11-03T09:10:00,\n"
    )
    m = fit_model("precinct,contest,choice,count\np1,gov,A,1\n", timing=timing)
    assert m.metadata["timing_source"] == "event_log"
    assert dict(m.speed_histogram) == {3: 0.5, 10: 0.5}
    assert dict(m.arrival_profile) == {7: 0.25, 8: 0.5, 9: 0.25}
    assert m.flag_frequencies == {"audio": 0.5, "large_font": 0.25}


def test_fit_from_path(tmp_path):
    path = tmp_path / "hist.csv"
    path.write_text("precinct,contest,choice,count\np1,gov,A,2\np1,gov,B,2\n")
    assert fit_model(str(path)).choice_probability("p1", "gov", "A") == 0.5


def test_hash_is_stable_and_content_based():
    text = "precinct,contest,choice,count\np1,gov,A,2\np1,gov,B,2\n"
    a, b = fit_model(text), fit_model(text)
    assert a.hash == b.hash
    assert VoterBehaviorModel.from_dict(a.to_dict()).hash == a.hash
    assert fit_model(text.replace("B,2", "B,3")).hash != a.hash


@pytest.mark.parametrize("text,line,fragment", [
    ("precinct,contest,choice,count\np1,gov,A,x\n", 2, "not an integer"),
    ("precinct,contest,choice,count\np1,gov,A,1\np1,gov,B,-1\n", 3, "nonnegative"),
    ("precinct,contest,choice\np1,gov,A\n", 1, "missing column"),
    ("precinct,contest,choice,count\np1,gov,A,1\np1,gov,B\n", 3, "fields"),
    ("precinct,contest,choice,count\np1,*,gov:A,1\n", 2, "pairs"),
    ("precinct,contest,choice,count\np1,gov,,1\n", 2, "empty"),
])
def test_malformed_rows(text, line, fragment):
    with pytest.raises(MalformedRecordError) as info:
        fit_model(text)
    assert info.value.line == line
    assert fragment in str(info.value)


def test_malformed_timing():
    with pytest.raises(MalformedRecordError) as info:
        fit_model("precinct,contest,choice,count\np1,gov,A,1\n",
                  timing="machine,session_start,session_end\nm,2020-11-03T08:00,2020-11-03T07:00\n")
    assert info.value.line == 2


def test_empty_precinct():
    with pytest.raises(EmptyDataError):
        fit_model("precinct,contest,choice,count\np1,gov,A,0\n")
    with pytest.raises(EmptyDataError):
        fit_model("precinct,contest,choice,count\np1,gov,A,3\n", precincts=["p1", "p2"])


def test_mixed_row_kinds_rejected():
    with pytest.raises(ConfigError):
        fit_model("precinct,contest,choice,count\np1,*,gov=A,1\np1,gov,B,1\n")


def test_model_validation():
    with pytest.raises(ConfigError):
        VoterBehaviorModel({"p": (PreferenceComponent(0.5, {"g": {"A": 1.0}}),)})
    with pytest.raises(ConfigError):
        VoterBehaviorModel({"p": (PreferenceComponent(1.0, {"g": {"A": 0.4}}),)})
    with pytest.raises(ConfigError):
        VoterBehaviorModel({"p": (PreferenceComponent(1.0, {"g": {"A": 1.0}}),)}, speed_histogram=((0, 1.0),))


def test_behaviors_enumerate_flags_independently():
    m = VoterBehaviorModel(
        {"p": (PreferenceComponent(1.0, {"g": {"A": 1.0}}),)},
        speed_histogram=((2, 0.5), (4, 0.5)),
        flag_frequencies={"audio": 0.1, "large_font": 0.0},
    )
    rows = {(b.speed_seconds, b.flags): b.prob for b in m.behaviors}
    assert rows == pytest.approx({
        (120, frozenset()): 0.45, (120, frozenset({"audio"})): 0.05,
        (240, frozenset()): 0.45, (240, frozenset({"audio"})): 0.05,
    })
