"""Exception types shared across the toolkit.

Everything raised on purpose derives from ExpForceError so callers (and the
CLI) can distinguish domain failures from bugs.
"""

from __future__ import annotations


class ExpForceError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(ExpForceError):
    """A caller-supplied argument violates a documented precondition."""


# --- pool ---------------------------------------------------------------


class MissingManifest(ExpForceError):
    """The pool directory has no manifest file."""


class SchemaViolation(ExpForceError):
    """A record (or the manifest header) breaks the pool schema."""

    def __init__(self, record_id: str, field: str, message: str):
        super().__init__(f"record {record_id!r}, field {field!r}: {message}")
        self.record_id = record_id
        self.field = field


class DuplicateId(SchemaViolation):
    """Two records share an id."""

    def __init__(self, record_id: str):
        super().__init__(record_id, "id", "duplicate record id")


class DanglingImageRef(ExpForceError):
    """A record's image_ref does not resolve to a readable file."""

    def __init__(self, record_id: str, image_ref: str):
        super().__init__(f"record {record_id!r}: image_ref {image_ref!r} does not resolve")
        self.record_id = record_id
        self.image_ref = image_ref


class IoFailure(ExpForceError):
    """Reading or writing an artifact failed at the OS level."""


class TooFewRecords(ExpForceError):
    """Pool too small for the requested partition."""


# --- oracle -------------------------------------------------------------


class ForceCapExceeded(ExpForceError):
    """Required force exceeds the gripper's force cap."""


# --- gateway ------------------------------------------------------------


class AuthMissing(ExpForceError):
    """The environment variable named by api_key_env is unset or empty."""


class TransportError(ExpForceError):
    """Transport failed and retries (if any) are exhausted."""


class ModelRefusal(ExpForceError):
    """The endpoint answered but produced no usable content."""


class ProviderError(ExpForceError):
    """An embedding provider returned something unusable."""


class ZeroVector(ExpForceError):
    """An embedding has zero (or non-finite) norm."""


class CacheCorruption(ExpForceError):
    """A cached embedding file failed its integrity checks."""


class DimensionMismatch(ExpForceError):
    """Two vectors that must share a dimension do not."""


# --- prompting ----------------------------------------------------------


class MissingImage(ExpForceError):
    """A prompt that requires an image got none."""


class Unparseable(ExpForceError):
    """No force value could be extracted from a model response."""


class EmptyDescription(ExpForceError):
    """The descriptor endpoint returned an empty description."""


# --- predictors ---------------------------------------------------------


class EmptyRetrieval(ExpForceError):
    """A backend that needs retrieved experiences got an empty candidate set."""


# --- evaluation ---------------------------------------------------------


class EmptyInput(ExpForceError):
    """Metrics requested over an empty collection."""


class InvalidK(ExpForceError):
    """A k value is not usable for the chosen backend."""


# --- config / cli -------------------------------------------------------


class ConfigError(ExpForceError):
    """The run configuration is malformed or references missing paths."""
