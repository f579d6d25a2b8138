"""Exception hierarchy.

Every fatal CLI error maps to a machine-readable category and process exit
code: usage errors exit 2, transfer errors 3, connectivity errors 4.
"""

from __future__ import annotations


class SkyhostError(Exception):
    exit_code = 3
    category = "transfer"


class UsageError(SkyhostError):
    exit_code = 2
    category = "usage"


class TransferError(SkyhostError):
    exit_code = 3
    category = "transfer"


class ConnectivityError(SkyhostError):
    exit_code = 4
    category = "connectivity"


class ModelDomainError(UsageError, ValueError):
    """A model parameter violated its domain (e.g. non-positive bandwidth)."""


# -- routing ----------------------------------------------------------------

class UnsupportedScheme(UsageError):
    pass


class UnsupportedRoute(UsageError):
    pass


class UnsupportedBackend(TransferError):
    pass


# -- queues -----------------------------------------------------------------

class QueueClosed(Exception):
    """Raised by queue operations after close(); signals normal end-of-stream
    to consumers and pipeline shutdown to blocked producers."""


class TransferAborted(TransferError):
    pass


# -- object endpoints -------------------------------------------------------

class ObjectNotFound(TransferError):
    pass


class SizeUnavailable(TransferError):
    pass


class RangeError(TransferError):
    """The backend returned a different byte count than requested."""


class IoError(TransferError):
    pass


class AuthError(TransferError):
    pass


class FormatError(TransferError):
    """Malformed structured input; message carries the 1-based line number."""


class OversizedRecord(TransferError):
    pass


# -- broker -----------------------------------------------------------------

class BrokerError(TransferError):
    pass


class UnknownTopic(BrokerError):
    pass


class TopicExists(BrokerError):
    pass


class PartitionOutOfRange(BrokerError):
    pass


class OffsetOutOfRange(BrokerError):
    pass


class MessageTooLarge(BrokerError):
    pass


# -- transport --------------------------------------------------------------

class MalformedFrame(TransferError):
    """A frame failed validation; ``reason`` is one of the REASONS strings."""

    BAD_MAGIC = "BadMagic"
    BAD_VERSION = "BadVersion"
    BAD_CRC = "BadCrc"
    TRUNCATED = "Truncated"
    BAD_HEADER = "BadHeader"
    BAD_LENGTH = "BadLength"
    REASONS = (BAD_MAGIC, BAD_VERSION, BAD_CRC, TRUNCATED, BAD_HEADER, BAD_LENGTH)

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class CorruptPayload(TransferError):
    pass


class HandshakeError(ConnectivityError):
    pass
