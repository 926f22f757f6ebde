"""Exception types raised across the package."""


class WarpboxError(Exception):
    """Base class for all package-specific errors."""


class WarpTiltError(WarpboxError):
    """A transform rotates out of the horizontal plane by more than the tolerance."""


class BehindCameraError(WarpboxError):
    """A point or box corner lies closer than the near plane."""


class DegenerateError(WarpboxError):
    """A geometric quantity is undefined (e.g. zero-area enclosing hull)."""


class FrameOutOfRangeError(WarpboxError):
    """A requested keyframe offset falls outside the trajectory."""


class NoObservationError(WarpboxError):
    """No (offset, view) pair yields a usable supervision term."""


class NonFiniteError(WarpboxError):
    """A numerical probe produced a non-finite value."""


class ConfigError(WarpboxError):
    """Invalid scene or experiment configuration."""


class SchemaError(WarpboxError):
    """A scene or labels file does not match the expected schema."""


class DivergenceError(WarpboxError):
    """Optimization loss exceeded 10x its initial value."""
