"""Exception hierarchy shared across the package."""


class TacoError(Exception):
    """Base class for all package errors."""


class IngestionError(TacoError):
    """A dataset file could not be read or decoded."""


class DimensionError(TacoError):
    """An image or grid does not satisfy a shape precondition."""


class CorruptLatentError(TacoError):
    """A latent grid contains indices outside the codebook."""


class TrainingDivergenceError(TacoError):
    """A training loss became NaN or Inf."""


class ProtocolError(TacoError):
    """A wire message violates the session state or format."""


class FormatError(TacoError):
    """A message cannot be represented in the wire format."""
