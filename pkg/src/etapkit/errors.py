"""Exception types raised across the pipeline."""


class EtapError(Exception):
    """Base class for all pipeline errors."""


class InsufficientEvents(EtapError):
    pass


class EmptyWindow(EtapError):
    pass


class InvalidRange(EtapError):
    pass


class NotUpsampled(EtapError):
    pass


class ShapeMismatch(EtapError):
    pass


class QueryOutOfSchedule(EtapError):
    pass


class NonFiniteUpdate(EtapError):
    pass


class EmptyMask(EtapError):
    pass


class ZeroNormDescriptor(EtapError):
    pass


class NonFinitePart(EtapError):
    pass


class NonFiniteLoss(EtapError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ConfigInvalid(EtapError):
    pass


class InsufficientForeground(EtapError):
    pass


class NoMinimaFound(EtapError):
    pass


class NoVisiblePoints(EtapError):
    pass


class EmptySet(EtapError):
    pass


class AlignmentError(EtapError):
    pass


class FormatError(EtapError):
    pass


class ChecksumError(EtapError):
    pass
