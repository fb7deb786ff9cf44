"""Exception hierarchy shared by the engine, the CLI and the HTTP service."""

from __future__ import annotations


class LongMemError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(LongMemError, ValueError):
    exit_code = 2


class InputFormatError(LongMemError, ValueError):
    """Malformed transcript, label, probe or triplet input."""

    exit_code = 3


class TurnOrderError(InputFormatError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected turn_index {expected}, got {got}")
        self.expected = expected
        self.got = got


class InvariantBreachError(LongMemError):
    """An operation was called with inputs violating its precondition."""


class BackendError(LongMemError):
    """Any failure coming from a text generator, scorer or reranker."""

    exit_code = 4
    retriable = True


class TransportError(BackendError):
    pass


class BackendTimeoutError(TransportError):
    pass


class AuthError(BackendError):
    retriable = False


class ProtocolError(BackendError):
    """The backend answered, but not with something we can use."""

    retriable = False


class BudgetExceededError(BackendError):
    retriable = False


class ParseError(BackendError):
    """Backend output could not be parsed into the declared structure."""

    retriable = False

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class CapacityOverflowError(LongMemError):
    """Capacity cannot be met because every remaining item is exempt."""

    exit_code = 5


class StoreError(LongMemError):
    exit_code = 3


class VersionMismatchError(StoreError):
    pass


class CorruptStateError(StoreError):
    pass
