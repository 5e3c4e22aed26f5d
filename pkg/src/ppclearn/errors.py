"""Exception hierarchy shared by all modules."""


class PpcError(Exception):
    """Base class for all errors raised by ppclearn."""


class DegenerateProjection(PpcError):
    """A point lies at or behind the X-ray source."""


class EmptySet(PpcError):
    """An operation received zero correspondences."""


class SingularSystem(PpcError):
    """The 6x6 normal equations are numerically singular."""


class NoContour(PpcError):
    """No contour generator points were found for the current pose."""


class BadParams(PpcError):
    """Phantom or simulation parameters are invalid."""


class SamplingFailed(PpcError):
    """Start pose sampling did not succeed within the retry budget."""


class UnknownVariant(PpcError):
    """Registration variant name is not recognised."""


class NonFinitePose(PpcError):
    """A registration update produced NaN or inf."""


class DivergedTraining(PpcError):
    """Training loss became non-finite."""


class EmptyInput(PpcError):
    """An aggregation received no records."""


class ConfigError(PpcError):
    """A run configuration is invalid or cannot be loaded."""


class ModelFormatError(PpcError):
    """A model file is malformed or has an unsupported version."""
