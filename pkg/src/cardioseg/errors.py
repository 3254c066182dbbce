"""Exception types shared across the package."""


class CardioSegError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(CardioSegError):
    """A metadata schema is malformed, or a record violates its schema."""


class EncodingError(CardioSegError):
    """A metadata value cannot be encoded (bad label, non-finite number)."""


class DecodingError(CardioSegError):
    """Head outputs do not match the schema arity."""


class MissingMetadataError(CardioSegError):
    """A required metadata entity is absent from a record."""


class ShapeError(CardioSegError):
    """Tensor shapes violate a documented contract."""


class ConfigError(CardioSegError):
    """A configuration value is out of its allowed range."""


class GenerationError(CardioSegError):
    """A phantom cannot be generated from the given spec/record pair."""


class EmptyMaskError(CardioSegError):
    """Sentinel raised when a distance metric receives an empty mask."""


class CheckpointMismatchError(CardioSegError):
    """A checkpoint's schema fingerprint does not match the dataset schema."""


class TrainingDivergedError(CardioSegError):
    """Training hit a non-finite loss; a diagnostic snapshot was written."""
