"""Exception hierarchy.

Every engine error carries the CLI exit code it maps to, so the command layer
never needs a lookup table.
"""

from __future__ import annotations


class SonoChainError(Exception):
    exit_code = 1


class InputError(SonoChainError):
    """Bad user-supplied input: missing files, unparseable records, manifests."""

    exit_code = 2


class DomainError(InputError, ValueError):
    """A value violates a domain invariant (label codec, probabilities, boxes)."""


class ParseError(DomainError):
    """A label string could not be mapped onto a taxonomy."""

    def __init__(self, message: str, token: str | None = None) -> None:
        super().__init__(message)
        self.token = token


class EvalError(InputError):
    pass


class ConfigError(SonoChainError):
    exit_code = 3


class SplitError(ConfigError):
    """A layout rectangle collapses to nothing on a concrete frame."""

    def __init__(self, message: str, region: str) -> None:
        super().__init__(message)
        self.region = region


class BackendError(SonoChainError):
    exit_code = 4
    subtask: str | None = None


class UnknownImage(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class SummaryUnavailable(BackendError):
    pass


class ChainError(SonoChainError):
    exit_code = 5


class PlanError(ChainError):
    pass


class ChainOverrun(ChainError):
    pass


class ReportError(ChainError):
    pass
