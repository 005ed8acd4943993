"""
Exception hierarchy shared by the odometry modules.
"""


class SalientOdometryError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SalientOdometryError):
    """Raised for invalid configuration, missing calibration or missing sidecar maps."""


class InputError(SalientOdometryError):
    """Raised when input data has the wrong shape or is insufficient."""


class PreconditionError(SalientOdometryError):
    """Raised when an operation is called outside its domain."""


class PointStatusError(PreconditionError):
    """Raised on an illegal point lifecycle transition."""
