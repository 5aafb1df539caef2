"""Exception hierarchy shared by every module of the package."""


class VmrfaError(Exception):
    """Base class for all errors raised by vmrfanet."""


class DimensionError(VmrfaError, ValueError):
    """Operand shapes are incompatible.

    ``axes`` names the offending axes so callers can report them.
    """

    def __init__(self, message, axes=()):
        super().__init__(message)
        self.axes = tuple(axes)


class ConfigError(VmrfaError, ValueError):
    pass


class ContractError(VmrfaError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class TapeReuseError(ContractError):
    pass


class DegenerateBatchError(VmrfaError, ValueError):
    pass


class LabelError(VmrfaError, ValueError):
    pass


class BatchCompositionError(VmrfaError, ValueError):
    pass


class SamplingError(VmrfaError, ValueError):
    pass


class IngestionError(VmrfaError, ValueError):
    pass


class EmptyDatasetError(IngestionError):
    pass


class ProtocolError(VmrfaError, ValueError):
    pass


class FormatError(VmrfaError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergenceError(VmrfaError, FloatingPointError):
    def __init__(self, part, value):
        super().__init__(f"loss part {part!r} is not finite ({value})")
        self.part = part
        self.value = value
