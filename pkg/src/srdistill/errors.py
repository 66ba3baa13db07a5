"""Exception types shared across the toolkit."""


class SRDistillError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidInputError(SRDistillError):
    """An argument violates a documented precondition (values, counts, modes)."""


class InvalidShapeError(InvalidInputError):
    """Array/tensor dimensions do not satisfy a documented precondition."""


class InvalidStateError(SRDistillError):
    """An operation was called on an object in the wrong mode or lifecycle state."""


class ConfigError(SRDistillError):
    """A configuration document is malformed, incomplete, or internally inconsistent."""


class DataError(SRDistillError):
    """A dataset source is empty, missing, or otherwise unusable."""


class IntegrityError(SRDistillError):
    """A persisted artifact failed its checksum or structural validation."""
