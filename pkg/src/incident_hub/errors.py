"""Exception hierarchy shared across the hub.

Every error carries a machine-readable ``code`` (the class name) that the
HTTP layer and the CLI surface verbatim.
"""

from __future__ import annotations


class HubError(Exception):
    """Base class for domain errors."""

    status = 400

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        return {"code": self.code, "message": str(self)}


class DimensionMismatch(HubError, ValueError):
    pass


class ZeroVector(HubError, ValueError):
    pass


class PersistenceFailure(HubError):
    status = 503


class NotFound(HubError, KeyError):
    status = 404

    def __str__(self) -> str:  # KeyError quotes its argument
        return Exception.__str__(self)


class DuplicateId(HubError):
    status = 409


class IllegalTransition(HubError):
    status = 409


class UnknownSite(HubError):
    status = 404


class UnknownStation(HubError):
    status = 404


class NoStations(HubError):
    status = 409


class InvalidPosition(HubError, ValueError):
    pass


class MalformedEvent(HubError, ValueError):
    pass


class PayloadTooLarge(MalformedEvent):
    status = 413


class StorageUnavailable(HubError):
    status = 503


class StorageFull(StorageUnavailable):
    pass


class IoFailure(StorageUnavailable):
    pass


class CorruptLog(HubError):
    status = 500


class EmptyDocument(HubError, ValueError):
    pass


class AllStopwords(HubError):
    pass


class AuthFailure(HubError):
    status = 401


class DeliveryError(Exception):
    """Raised by a notice transport when a push attempt fails."""


class ParseError(HubError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ConnectionLost(HubError):
    status = 503

    def __init__(self, message: str, report=None) -> None:
        super().__init__(message)
        self.report = report
