"""Exception hierarchy shared across the package."""


class RheovisionError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RheovisionError):
    """A model/layer configuration constraint is violated (bad shapes, sizes)."""


class InputError(RheovisionError):
    """Runtime input does not match what an operation requires."""


class ProtocolError(RheovisionError):
    """Experiment bookkeeping constraint violated (folds, references, mix)."""


class LossError(RheovisionError):
    """Loss cannot be computed (e.g. every target entry masked out)."""


class NonFiniteGradientError(RheovisionError):
    """A parameter gradient went NaN/inf during optimization."""


class NormalizationError(RheovisionError):
    """Normalization statistics cannot be fitted (zero variance category)."""


class EmptySurfaceError(RheovisionError):
    """Paddle masking left no valid depth cell."""


class LedDecodeError(RheovisionError):
    """An LED strip cell is unreadable (intensity in the dead zone)."""


class CheckpointError(RheovisionError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic/version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes disagree with the model built from the stored config."""
