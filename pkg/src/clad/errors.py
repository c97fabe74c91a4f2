"""Error categories mapped to CLI exit codes."""


class UsageError(Exception):
    """Bad arguments or config keys (exit 2)."""


class PreconditionError(Exception):
    """Missing dataset/checkpoint or violated contract (exit 3)."""


class NumericError(Exception):
    """Non-finite loss or other runtime numeric failure (exit 4)."""
