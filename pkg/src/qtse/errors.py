"""Exception and warning types raised across the package."""


class QtseError(Exception):
    """Base class for all package errors."""


class InputTooShort(QtseError, ValueError):
    pass


class ShapeError(QtseError, ValueError):
    pass


class MetricUndefined(QtseError, ValueError):
    pass


class SampleRateMismatch(QtseError, ValueError):
    pass


class NeedMultichannel(QtseError, ValueError):
    pass


class InvalidThreshold(QtseError, ValueError):
    pass


class ScorerUnavailable(QtseError, RuntimeError):
    pass


class GradError(QtseError, ValueError):
    pass


class OptimStepRejected(QtseError, FloatingPointError):
    pass


class CannotSetSnr(QtseError, ValueError):
    pass


class GeometryError(QtseError, ValueError):
    pass


class NoData(QtseError, ValueError):
    pass


class StrategyUnavailable(QtseError, RuntimeError):
    pass


class CheckpointError(QtseError, ValueError):
    pass


class BeamformerSingular(RuntimeWarning):
    """Emitted when a frequency bin's distortion covariance cannot be inverted.

    The affected bins are passed through from the reference channel.
    """
