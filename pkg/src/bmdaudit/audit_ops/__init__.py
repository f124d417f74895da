"""Voter-behavior models, audit scripts and official policies."""
from bmdaudit.audit_ops.model import VoterBehaviorModel, fit_model
from bmdaudit.audit_ops.policy import (
    AdaptivePolicy,
    EmergencyState,
    OfficialPolicy,
    ScriptAmendment,
    StaticPolicy,
    apply_policy,
    emergency_state,
)
from bmdaudit.audit_ops.script import AuditEntry, AuditScript, generate_script, seed_from_dice, verify_agreement

__all__ = [
    "VoterBehaviorModel",
    "fit_model",
    "AuditEntry",
    "AuditScript",
    "generate_script",
    "verify_agreement",
    "seed_from_dice",
    "OfficialPolicy",
    "StaticPolicy",
    "AdaptivePolicy",
    "ScriptAmendment",
    "apply_policy",
    "EmergencyState",
    "emergency_state",
]
