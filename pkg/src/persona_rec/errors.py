"""Exception types shared across the package.

The CLI maps these onto distinct exit codes: configuration problems exit 2,
data problems exit 3, failed checks and diverged training exit 4.
"""


class PersonaRecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(PersonaRecError):
    """Invalid configuration: bad key, inconsistent flags, bad dimensions."""


class DimensionError(ConfigurationError):
    """Tensor shapes incompatible with the requested operation."""


class DataError(PersonaRecError):
    """Problems with input data files or their contents."""


class ParseError(DataError):
    """A data file line does not match the expected format."""


class FormatError(DataError):
    """A binary or vector file has a malformed header or payload."""


class VocabularyError(DataError):
    """Token or entity id outside the vocabulary range."""


class DegenerateAttentionError(DataError):
    """Softmax requested over an all-masked position set."""


class DegenerateInputError(DataError):
    """Encoder input has no unmasked elements to attend over."""


class ColdStartError(DataError):
    """User has no history items; the caller decides the fallback."""


class TrainingDivergenceError(PersonaRecError):
    """Non-finite loss or gradients encountered during optimization."""


class CheckInapplicableError(PersonaRecError):
    """Gradient check cannot run, e.g. the function output is not finite."""
