"""Shared exception types. The CLI maps these onto exit codes:
contract/config problems exit 1, I/O problems exit 2."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Array shapes incompatible with the requested operation."""


class NumericError(ContractError):
    """Non-finite values where finite ones are required."""


class ConfigError(ContractError):
    """Invalid or inconsistent configuration."""


class CapacityError(ContractError):
    """Input exceeds a configured capacity limit."""


class DataError(OSError):
    """Unreadable or malformed input data or file."""
