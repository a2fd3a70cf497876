"""Shared exception types."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, missing cache)."""


class DomainError(ValueError):
    """A numerically valid input falls outside the operation's domain (e.g. sigma below sigma_min)."""


class CheckpointError(IOError):
    """Checkpoint file is corrupt: bad magic, unknown version, or truncated payload."""


class ConfigError(ValueError):
    """Run configuration is invalid; carries the offending key when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
