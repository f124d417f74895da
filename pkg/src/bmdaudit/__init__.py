"""Detection statistics for live BMD audits and spoiled-ballot monitoring."""
from bmdaudit.audit_stats import (
    AuditQuery,
    OracleQuery,
    StaffingInput,
    audits_needed,
    detection_probability,
    oracle_min_audits,
    oracle_survival,
    staffing_plan,
    with_replacement_equivalent,
)
from bmdaudit.spoilage import (
    SpoilageModel,
    SpoilageMonitor,
    margin_delta,
    poisson_quantile,
    spoilage_threshold,
    undetectable_attack_budget,
)

__version__ = "0.1.0"

__all__ = [
    "AuditQuery", "OracleQuery", "StaffingInput", "audits_needed", "detection_probability",
    "oracle_min_audits", "oracle_survival", "staffing_plan", "with_replacement_equivalent",
    "SpoilageModel", "SpoilageMonitor", "margin_delta", "poisson_quantile", "spoilage_threshold",
    "undetectable_attack_budget", "__version__",
]
