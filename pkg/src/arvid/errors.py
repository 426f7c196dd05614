"""Exception types shared across the package.

The CLI maps each class to a distinct process exit code.
"""


class ConfigurationError(ValueError):
    """A configuration value is out of range or inconsistent; the message names the field."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape mismatch, ordering, missing state)."""


class NumericsError(RuntimeError):
    """A numeric abort: non-finite values appeared mid-computation. Carries a diagnostic message."""
