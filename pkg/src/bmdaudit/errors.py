"""Exception hierarchy shared by every module."""


class BmdAuditError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(BmdAuditError, ValueError):
    """A numeric argument lies outside its documented domain."""


class UnreachableError(BmdAuditError):
    """The requested risk limit or confidence can never be reached."""


class ConfigError(BmdAuditError, ValueError):
    """A scenario, model or policy is inconsistent."""


class MalformedRecordError(ConfigError):
    """An input record could not be parsed.

    Attributes:
        line: 1-based line number of the offending record, when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyDataError(ConfigError):
    """A precinct has no historical ballots to fit."""


class OutOfOrderError(BmdAuditError, ValueError):
    """A spoil event arrived with a timestamp earlier than its predecessor."""


class ScheduleExhaustedError(BmdAuditError):
    """An audit would double-book a machine in a time slot."""


class ReserveExceededError(BmdAuditError):
    """An adaptive policy has already spent more than its reserve."""
