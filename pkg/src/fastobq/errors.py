"""Exception hierarchy shared by every fastobq module."""


class FastOBQError(Exception):
    """Base class for all errors raised by this package."""


# tensor_io
class BadMagic(FastOBQError):
    pass


class TruncatedPayload(FastOBQError):
    pass


class UnsupportedDtype(FastOBQError):
    pass


class IoFailure(FastOBQError):
    pass


class ShapeMismatch(FastOBQError):
    pass


class MissingFile(FastOBQError):
    pass


class InvalidTensor(FastOBQError):
    """Tensor violates the container invariants (ndim, dims, payload size)."""


# linalg / grid
class NonFinite(FastOBQError):
    pass


class EmptyCalibration(FastOBQError):
    pass


class NotPositiveDefinite(FastOBQError):
    """Cholesky hit a non-positive pivot; usually means damping is too small."""


class DeadIndex(FastOBQError):
    pass


class SingularPivot(FastOBQError):
    pass


# harness
class MixedGrids(FastOBQError):
    pass


class ConfigError(FastOBQError):
    pass
