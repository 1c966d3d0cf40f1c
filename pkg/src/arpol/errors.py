"""Shared exception types."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, domain)."""


class ConfigError(ValueError):
    """A configuration is invalid or inconsistent with the artifacts it names."""


class NumericsError(RuntimeError):
    """Training or evaluation produced a non-finite quantity; never clipped silently."""
