"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands disagree on dimensions."""


class DivergenceError(RuntimeError):
    """Non-finite values appeared during training or gradient checking."""


class DegenerateWorldError(ValueError):
    """A world configuration cannot produce a usable synthetic corpus."""


class CorpusFormatError(RuntimeError):
    """A persisted file is malformed, truncated, or of the wrong version."""


class InsufficientProfilesError(ValueError):
    """Too few context profiles to train an autoencoder for a category."""


class AttackError(RuntimeError):
    """Attack preconditions violated or budget misconfigured."""


class ConfigError(ValueError):
    """A run configuration is invalid."""
