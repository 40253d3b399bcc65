"""Exception types shared across the telemetry stack."""


class VizarelError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(VizarelError):
    """A tensor or declared schema violates the session contract."""


class ProtocolError(VizarelError):
    """A wire message violates framing or message-ordering rules."""


class FramingError(ProtocolError):
    """Bytes on the wire cannot be parsed as a message frame."""


class BackpressureError(VizarelError):
    """The commit queue is full; the caller may retry later."""

    def __init__(self, message: str, queue_depth: int, retry_after_ms: int = 50):
        super().__init__(message)
        self.queue_depth = queue_depth
        self.retry_after_ms = retry_after_ms


class NotFoundError(VizarelError, KeyError):
    """The requested episode id is not in the manifest."""


class BoundsError(VizarelError, IndexError):
    """A step or dimension index is outside its valid range."""


class CorruptionError(VizarelError):
    """On-disk data failed checksum or structural validation."""


class StoreStateError(VizarelError):
    """The store is closed or has entered its read-only failure state."""
