"""Exception hierarchy shared by every module."""


class AdeptError(Exception):
    pass


class ContractError(AdeptError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    pass


class ConfigError(AdeptError):
    pass


class NumericError(AdeptError, ArithmeticError):
    pass


class GenerationError(NumericError):
    """The reverse diffusion chain produced a non-finite value."""

    def __init__(self, step: int, message: str = "", prefix=None):
        self.step = step
        self.prefix = prefix
        super().__init__(message or f"non-finite value at denoising step {step}")


class FormatError(AdeptError):
    """Base for on-disk file problems (datasets and checkpoints)."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass
