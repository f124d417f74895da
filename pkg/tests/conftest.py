from __future__ import annotations

import pytest

from bmdaudit.audit_ops.model import PreferenceComponent, VoterBehaviorModel
from bmdaudit.schedule import Schedule
from bmdaudit.world.config import Contest, ElectionConfig, Location, MonitorSettings, Precinct


def one_race_config(
    voters: int = 1000,
    share_a: float = 0.0,
    machines: int = 100,
    slot_minutes: int = 60,
    background: float = 0.01,
    detect: float = 0.0,
    **kwargs,
) -> ElectionConfig:
    """One precinct, one location, one two-way race.

    With ``share_a=0`` every voter picks B, so a flip to A can change every
    session and a rate-``p`` attack tampers each session with probability p.
    """
    dist = {"A": share_a, "B": 1 - share_a} if 0 < share_a < 1 else ({"A": 1.0} if share_a == 1 else {"B": 1.0})
    model = VoterBehaviorModel({"p1": (PreferenceComponent(1.0, {"race": dist}),)})
    return ElectionConfig(
        contests=(Contest("race", ("A", "B")),),
        precincts=(Precinct("p1", "loc1", voters),),
        locations=(Location("loc1", tuple(f"m{i:03d}" for i in range(machines))),),
        behavior=model,
        schedule=Schedule(open_minute=420, close_minute=1140, slot_minutes=slot_minutes),
        background_spoil_rate=background,
        review_detect_probability=detect,
        monitor=MonitorSettings(expected_rate=0.01),
        **kwargs,
    )


@pytest.fixture
def small_config():
    return one_race_config()


def two_contest_config(machines: int = 60) -> ElectionConfig:
    """Two precincts at two locations; the second precinct also votes on a measure."""
    model = VoterBehaviorModel(
        {
            "p1": (
                PreferenceComponent(0.7, {"gov": {"A": 0.9, "B": 0.1}}),
                PreferenceComponent(0.3, {"gov": {"A": 0.2, "B": 0.8}}),
            ),
            "p2": (
                PreferenceComponent(0.5, {"gov": {"A": 1.0}, "prop": {"yes": 0.25, "no": 0.75}}),
                PreferenceComponent(0.5, {"gov": {"B": 1.0}, "prop": {"yes": 0.75, "no": 0.25}}),
            ),
        },
        speed_histogram=((2, 0.3), (5, 0.5), (12, 0.2)),
        flag_frequencies={"audio": 0.1, "large_font": 0.2},
        arrival_profile=((7, 0.1), (8, 0.2), (12, 0.3), (17, 0.4)),
    )
    return ElectionConfig(
        contests=(Contest("gov", ("A", "B")), Contest("prop", ("yes", "no"), scope=("p2",))),
        precincts=(Precinct("p1", "east", 3000), Precinct("p2", "west", 1000)),
        locations=(
            Location("east", tuple(f"e{i:02d}" for i in range(machines))),
            Location("west", tuple(f"w{i:02d}" for i in range(machines))),
        ),
        behavior=model,
        schedule=Schedule(start_date="2020-11-03", open_minute=420, close_minute=1140, slot_minutes=60),
        monitor=MonitorSettings(expected_rate=0.01),
    )
