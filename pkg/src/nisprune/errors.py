"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError is a usage problem (exit 2),
ModelFormatError / ShapeError / DataError are bad inputs (exit 3), anything
else is treated as an internal invariant violation (exit 4).
"""


class NispruneError(Exception):
    """Base class for everything raised on purpose by this package."""


class ModelFormatError(NispruneError):
    """A serialized model or plan document could not be parsed."""


class ShapeError(NispruneError):
    """Layers, masks, or responses do not fit together."""


class DataError(NispruneError):
    """A dataset is missing, malformed, or degenerate for the operation."""


class ConfigError(NispruneError):
    """An option or argument value is outside its allowed range."""
