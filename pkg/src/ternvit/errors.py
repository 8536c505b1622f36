"""Exception hierarchy shared across the package."""


class TernvitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TernvitError, ValueError):
    """Operand dimensions are inconsistent."""


class NonFiniteError(TernvitError, ValueError):
    """A NaN or infinity showed up where only finite values are allowed."""


class CorruptPackedDataError(TernvitError, ValueError):
    """A packed weight word holds the reserved 0b11 bit pattern."""


class ContainerError(TernvitError):
    """Base class for model container parse/validation failures."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class SectionOverlapError(ContainerError):
    pass


class CorruptTernaryError(ContainerError, CorruptPackedDataError):
    pass


class MissingTensorError(ContainerError):
    pass


class TensorFileError(TernvitError):
    """An FTEN tensor file is malformed."""
