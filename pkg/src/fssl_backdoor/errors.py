"""Exception types shared across the simulator."""


class FSSLError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FSSLError, ValueError):
    pass


class LayoutError(FSSLError, ValueError):
    """Two parameter vectors (or a vector and a gradient) disagree on layout."""


class NonFiniteError(FSSLError, FloatingPointError):
    pass


class ZeroNormError(FSSLError, ZeroDivisionError):
    """Cosine similarity requested for a vector with zero norm."""


class ConfigError(FSSLError, ValueError):
    pass


class DataError(FSSLError, ValueError):
    pass


class DefenseError(FSSLError, ValueError):
    pass
