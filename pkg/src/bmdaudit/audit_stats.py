"""Closed-form detection math for live audits of ballot marking devices.

Two sampling models are covered:

* with replacement: every audit independently catches a cheating machine
  with probability ``p``, so ``n`` audits detect it with ``1 - (1 - p)**n``;
* without replacement (the "shoulder-surfing" oracle): ``n`` of ``N`` cast
  ballots are inspected, ``T`` of which were tampered.

All products and powers are evaluated in log space so that electorates in
the millions and cheat rates near 1e-6 neither underflow nor lose digits.

Note on the 99% figure: ``audits_needed(0.01, 0.99)`` is 459.  A figure of
468 audits is sometimes quoted for this case; it does not follow from
``1 - 0.99**n`` and is not reproduced here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from bmdaudit.errors import InvalidParameterError, UnreachableError

__all__ = [
    "AuditQuery",
    "OracleQuery",
    "StaffingInput",
    "StaffingPlan",
    "detection_probability",
    "audits_needed",
    "oracle_survival",
    "oracle_log_survival",
    "oracle_min_audits",
    "with_replacement_equivalent",
    "staffing_plan",
]


def _check_probability(name: str, value: float, *, low_open=False, high_open=False) -> None:
    if not isinstance(value, (int, float)) or math.isnan(value):
        raise InvalidParameterError(f"{name} must be a real number, got {value!r}")
    if value < 0 or value > 1 or (low_open and value == 0) or (high_open and value == 1):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise InvalidParameterError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")


def _check_count(name: str, value: int, *, positive=False) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidParameterError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (positive and value == 0):
        kind = "positive" if positive else "nonnegative"
        raise InvalidParameterError(f"{name} must be {kind}, got {value!r}")


@dataclass(frozen=True)
class AuditQuery:
    """Cheat rate per audited session and number of audits."""

    cheat_rate: float
    audits: int

    def __post_init__(self):
        _check_probability("cheat_rate", self.cheat_rate)
        _check_count("audits", self.audits)

    def detection_probability(self) -> float:
        return detection_probability(self.cheat_rate, self.audits)


@dataclass(frozen=True)
class OracleQuery:
    """Total ballots, tampered ballots and audits for the oracle bound."""

    total_ballots: int
    tampered: int
    audits: int

    def __post_init__(self):
        _check_count("total_ballots", self.total_ballots, positive=True)
        _check_count("tampered", self.tampered)
        _check_count("audits", self.audits)
        if self.tampered > self.total_ballots:
            raise InvalidParameterError("tampered cannot exceed total_ballots")
        if self.audits > self.total_ballots:
            raise InvalidParameterError("audits cannot exceed total_ballots")

    def survival(self) -> float:
        return oracle_survival(self.total_ballots, self.tampered, self.audits)

    def with_replacement_detection(self) -> float:
        return with_replacement_equivalent(self.total_ballots, self.tampered, self.audits)


def detection_probability(cheat_rate: float, audits: int) -> float:
    """Probability that at least one of ``audits`` audits catches the machine.

    Computed as ``-expm1(n * log1p(-p))`` which stays accurate for tiny
    ``p`` and large ``n``.
    """
    _check_probability("cheat_rate", cheat_rate)
    _check_count("audits", audits)
    if audits == 0 or cheat_rate == 0:
        return 0.0
    if cheat_rate == 1:
        return 1.0
    return -math.expm1(audits * math.log1p(-cheat_rate))


def audits_needed(cheat_rate: float, target_confidence: float) -> int:
    """Smallest number of audits whose detection probability reaches the target."""
    _check_probability("cheat_rate", cheat_rate, low_open=True)
    _check_probability("target_confidence", target_confidence, low_open=True, high_open=True)
    if cheat_rate == 1:
        return 1
    n = max(1, math.ceil(math.log1p(-target_confidence) / math.log1p(-cheat_rate)))
    # the closed form can be off by one near integer boundaries
    while n > 1 and detection_probability(cheat_rate, n - 1) >= target_confidence:
        n -= 1
    while detection_probability(cheat_rate, n) < target_confidence:
        n += 1
    return n


def _validate_oracle(total_ballots: int, tampered: int, audits: int) -> None:
    OracleQuery(total_ballots, tampered, audits)


def oracle_log_survival(total_ballots: int, tampered: int, audits: int) -> float:
    """Log of C(N-T, n) / C(N, n) through log-gamma; O(1) cost.

    Used for bracketing searches; :func:`oracle_survival` is the reference.
    """
    _validate_oracle(total_ballots, tampered, audits)
    clean = total_ballots - tampered
    if audits > clean:
        return -math.inf
    if audits == 0 or tampered == 0:
        return 0.0
    return (
        math.lgamma(clean + 1)
        - math.lgamma(clean - audits + 1)
        - math.lgamma(total_ballots + 1)
        + math.lgamma(total_ballots - audits + 1)
    )


def oracle_survival(total_ballots: int, tampered: int, audits: int) -> float:
    """Probability that ``audits`` ballots drawn without replacement are all clean.

    Evaluates the running product ``prod_i (N - i - T) / (N - i)`` for
    ``i < n`` as a sum of ``log1p(-T / (N - i))`` terms.  The result equals
    ``C(N - T, n) / C(N, n)``.
    """
    _validate_oracle(total_ballots, tampered, audits)
    if audits > total_ballots - tampered:
        return 0.0
    if audits == 0 or tampered == 0:
        return 1.0
    return math.exp(_log_product(total_ballots, tampered, audits))


def _log_product(total_ballots: int, tampered: int, audits: int) -> float:
    return math.fsum(
        math.log1p(-tampered / (total_ballots - i)) for i in range(audits)
    )


def oracle_min_audits(total_ballots: int, tampered: int, risk_limit: float) -> int:
    """Smallest ``n`` whose oracle survival probability is at most ``risk_limit``."""
    _check_count("total_ballots", total_ballots, positive=True)
    _check_count("tampered", tampered)
    _check_probability("risk_limit", risk_limit, low_open=True, high_open=True)
    if tampered > total_ballots:
        raise InvalidParameterError("tampered cannot exceed total_ballots")
    if tampered == 0:
        raise UnreachableError("unreachable risk limit: nothing is tampered, survival stays 1")

    target = math.log(risk_limit)
    lo, hi = 0, total_ballots - tampered + 1  # survival(hi) == 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if oracle_log_survival(total_ballots, tampered, mid) <= target:
            hi = mid
        else:
            lo = mid
    n = hi
    # settle the boundary with the product form
    while n > 1 and oracle_survival(total_ballots, tampered, n - 1) <= risk_limit:
        n -= 1
    while oracle_survival(total_ballots, tampered, n) > risk_limit:
        n += 1
    return n


def with_replacement_equivalent(total_ballots: int, tampered: int, audits: int) -> float:
    """Detection probability of the with-replacement model with ``p = T / N``."""
    _validate_oracle(total_ballots, tampered, audits)
    return detection_probability(tampered / total_ballots, audits)


@dataclass(frozen=True)
class StaffingInput:
    total_audits: int
    early_vote_share: float
    election_day_share: float
    mail_share: float
    early_locations: int
    early_days: int
    election_day_teams: int

    def __post_init__(self):
        _check_count("total_audits", self.total_audits)
        for name in ("early_vote_share", "election_day_share", "mail_share"):
            _check_probability(name, getattr(self, name))
        total = self.early_vote_share + self.election_day_share + self.mail_share
        if abs(total - 1.0) > 1e-9:
            raise InvalidParameterError(f"vote shares must sum to 1, got {total!r}")
        for name in ("early_locations", "early_days", "election_day_teams"):
            _check_count(name, getattr(self, name), positive=True)


@dataclass(frozen=True)
class StaffingPlan:
    """Audit workload per phase and per unit; values are left fractional."""

    early_audits: float
    election_day_audits: float
    mail_audits: float
    per_early_location: float
    per_early_location_per_day: float
    per_election_day_team: float

    def rounded(self, decimals: int = 2) -> dict[str, float]:
        return {k: round(v, decimals) for k, v in self.__dict__.items()}


def staffing_plan(s: StaffingInput) -> StaffingPlan:
    """Split the audit budget across voting phases in proportion to vote share.

    Mail ballots cannot be live-audited, so their share of the budget is
    simply not spent; in-person phases are not renormalized.
    """
    if not isinstance(s, StaffingInput):
        raise InvalidParameterError("staffing_plan expects a StaffingInput")
    early = s.total_audits * s.early_vote_share
    election_day = s.total_audits * s.election_day_share
    per_location = early / s.early_locations
    return StaffingPlan(
        early_audits=early,
        election_day_audits=election_day,
        mail_audits=0.0,
        per_early_location=per_location,
        per_early_location_per_day=per_location / s.early_days,
        per_election_day_team=election_day / s.election_day_teams,
    )
