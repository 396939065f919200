"""Exception types shared across the market engine."""


class MarketError(Exception):
    """Base class for every error raised by predmarket."""


class ValidationError(MarketError, ValueError):
    """Input failed a contract check (shape, range, ordering)."""


class ConfigError(ValidationError):
    """A configuration key is unknown, missing or out of range.

    ``key`` carries the dotted path of the offending key.
    """

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class ConflictError(MarketError):
    """Duplicate session, settlement or table row."""


class StateError(MarketError):
    """Operation not allowed in the session's current state."""


class LateSubmissionError(StateError):
    """Forecast arrived after the session closed."""


class ReplayError(MarketError):
    """Ledger could not be replayed; ``index`` is the offending record position."""

    def __init__(self, index, message):
        self.index = index
        super().__init__(f"record {index}: {message}")
