"""Simulated elections: configuration, malware strategies and the trial engine."""
from bmdaudit.world.config import Contest, ElectionConfig, Location, MonitorSettings, Precinct, Scenario, load_scenario
from bmdaudit.world.engine import (
    CatchEvent,
    MarginReport,
    SimulationReport,
    TrialOutcome,
    margin_report,
    simulate,
    simulate_trial,
    trial_script_seed,
)
from bmdaudit.world.strategies import (
    DownBallot,
    FlipRule,
    Honest,
    InconsistentBarcode,
    MalwareStrategy,
    ObservableSession,
    SecretKnock,
    Trigger,
    TriggeredSwitch,
    UniformSwitch,
    strategy_from_dict,
)

__all__ = [
    "Contest", "ElectionConfig", "Location", "MonitorSettings", "Precinct", "Scenario", "load_scenario",
    "CatchEvent", "MarginReport", "SimulationReport", "TrialOutcome", "margin_report", "simulate",
    "simulate_trial", "trial_script_seed",
    "DownBallot", "FlipRule", "Honest", "InconsistentBarcode", "MalwareStrategy", "ObservableSession",
    "SecretKnock", "Trigger", "TriggeredSwitch", "UniformSwitch", "strategy_from_dict",
]
