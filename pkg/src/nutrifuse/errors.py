"""Exception hierarchy shared by all nutrifuse modules."""


class NutrifuseError(Exception):
    """Base class for every error raised by the package."""


class DataError(NutrifuseError, ValueError):
    """Input data violates a schema or invariant."""


class MissingFieldError(DataError):
    pass


class UnitError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class EmptyManifestError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class BadStrideError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class ZeroMeanError(DataError):
    pass


class IngredientError(DataError):
    pass


class UnmappableIngredientError(IngredientError):
    pass


class RejectedTermError(IngredientError):
    pass


class EmptyIngredientListError(IngredientError):
    pass


class MissingPlaceholderError(DataError):
    pass


class TurnRangeError(DataError):
    pass


class ShapeMismatchError(NutrifuseError, ValueError):
    pass


class DoubleFusionError(NutrifuseError, ValueError):
    pass


class ResolutionError(NutrifuseError, ValueError):
    pass


class UninitializedModelError(NutrifuseError, RuntimeError):
    pass


class ConfigMismatchError(NutrifuseError, ValueError):
    """Checkpoint header disagrees with the requested configuration."""


class ConfigError(NutrifuseError, ValueError):
    """Invalid or unknown configuration key/value."""


class EncoderUnavailableError(NutrifuseError, RuntimeError):
    pass


class DivergenceError(NutrifuseError, RuntimeError):
    pass


class ClientError(NutrifuseError, RuntimeError):
    """Transport-level failure talking to a multimodal model."""


class ParseError(NutrifuseError, ValueError):
    pass
