"""Shared exception types."""


class ConfigurationError(ValueError):
    """Raised when an operation or config file is given inconsistent settings.

    The message always names the offending operation or config key so the CLI
    can surface it on one line.
    """
