"""Error taxonomy shared by the library and the CLI.

The CLI maps these to distinct exit codes: configuration and usage problems
exit 2, missing or corrupt data exits 3, numeric failures exit 4.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


class DataError(RuntimeError):
    """Missing, corrupt, or conflicting data artifacts (exit code 3)."""


class NumericError(RuntimeError):
    """Numeric divergence, e.g. a NaN training loss (exit code 4)."""
