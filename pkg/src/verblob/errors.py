"""Exception hierarchy shared by every service and the client.

Errors cross the wire by class name, so every class defined here can be
raised on a server and re-raised with the same type on the caller.
"""

from __future__ import annotations


class StoreError(Exception):
    """Base class for every error raised by this package."""


# geometry / planning
class InvalidGeometry(StoreError, ValueError):
    pass


class RangeOutOfBounds(StoreError, ValueError):
    pass


class UnalignedWrite(StoreError, ValueError):
    pass


class MetadataMissing(StoreError):
    pass


class PrevTreeUnavailable(StoreError):
    pass


# metadata ring
class KeyConflict(StoreError):
    pass


class GatewayUnreachable(StoreError):
    pass


class ValueTooLarge(StoreError, ValueError):
    pass


# data providers
class CapacityExceeded(StoreError):
    pass


class PageConflict(StoreError):
    pass


# provider manager
class DuplicateId(StoreError):
    pass


class UnknownProvider(StoreError):
    pass


class NoProvidersAvailable(StoreError):
    pass


# versioning manager
class UnknownBlock(StoreError):
    pass


class UnknownTicket(StoreError):
    pass


class AbortedTicket(StoreError):
    pass


class NotPermitted(StoreError):
    pass


class VersionNotPublished(StoreError):
    pass


# client
class ReadFailed(StoreError):
    pass


class WriteAborted(StoreError):
    pass


class ManagerUnreachable(StoreError):
    pass


# transport
class TransportError(StoreError):
    pass


class Timeout(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class MalformedFrame(TransportError, ValueError):
    pass


class AddressInUse(TransportError):
    pass


class UnknownOpcode(TransportError):
    pass


class RemoteError(StoreError):
    """A server raised something that has no counterpart on this side."""


class StartupTimeout(StoreError):
    pass


def _collect(cls: type) -> dict[str, type]:
    out = {cls.__name__: cls}
    for sub in cls.__subclasses__():
        out.update(_collect(sub))
    return out


ERRORS_BY_NAME: dict[str, type[StoreError]] = _collect(StoreError)


def error_from_name(name: str, message: str) -> StoreError:
    cls = ERRORS_BY_NAME.get(name)
    if cls is None:
        return RemoteError(f"{name}: {message}")
    return cls(message)
