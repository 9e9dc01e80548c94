"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific one that applies.
"""


class ConfigurationError(ValueError):
    """Invalid inputs, scenario files, or option combinations."""


class PhysicsError(RuntimeError):
    """A simulation produced a physically impossible state (e.g. overlap)."""


class OracleFailure(RuntimeError):
    """An independent verification check missed its declared tolerance."""
