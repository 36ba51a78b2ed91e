"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit status without a lookup table.
"""


class ElsaError(Exception):
    exit_code = 1


class ConfigError(ElsaError):
    exit_code = 1


class DataError(ElsaError):
    exit_code = 2


class DimensionError(ElsaError, ValueError):
    exit_code = 2


class NumericError(ElsaError, ArithmeticError):
    exit_code = 2


class InfeasibleError(ElsaError):
    """A sparsity request cannot be met without touching frozen weights."""

    exit_code = 3


class ContractError(ElsaError):
    """A caller violated a documented precondition (e.g. dropped a frozen index)."""

    exit_code = 3


class IntegrityError(ElsaError):
    exit_code = 4


class FormatError(IntegrityError):
    """Malformed checkpoint bytes."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CorruptionError(IntegrityError):
    """Stamped low bits disagree with the freeze counter."""
