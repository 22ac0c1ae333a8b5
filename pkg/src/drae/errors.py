"""Shared exception types raised across the package."""


class ShapeMismatch(ValueError):
    """Operands have incompatible dimensions."""


class NonFiniteInput(ValueError):
    """An input contains NaN or Inf."""


class DegenerateVector(ValueError):
    """A vector that must be nonzero has zero norm."""


class InvalidParameter(ValueError):
    """A scalar parameter is outside its legal range."""


class MissingExpert(LookupError):
    """An active-set id does not name an existing expert."""


class InsufficientData(ValueError):
    """Too few observations for the requested computation."""


class CheckpointVersionError(ValueError):
    """Checkpoint file declares an unsupported version."""


class ConfigError(ValueError):
    """Run configuration is invalid; ``path`` names the offending key."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class CorpusFormatError(ValueError):
    """Corpus file is malformed; ``line`` is the 1-based offending line."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class RulesetFormatError(ValueError):
    """Rule-set file is malformed."""
