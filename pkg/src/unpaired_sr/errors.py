"""Exception types shared across the package."""


class UnsupportedFormatError(ValueError):
    """Image file is not an 8-bit RGB raster."""


class ShapeError(ValueError):
    """Tensor shapes do not agree with what an operation expects."""


class CorpusError(RuntimeError):
    """An image corpus cannot satisfy a request (empty, overlapping, too small)."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class CompositionError(KeyError):
    """A weighted objective is missing one of its required terms."""


class NumericError(FloatingPointError):
    """NaN or Inf encountered in a loss or its inputs."""


class SpecError(ValueError):
    """A network description is internally inconsistent."""
