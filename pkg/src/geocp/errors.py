"""Exception types shared across the package."""


class GeocpError(Exception):
    """Base class for package-specific failures."""


class ConfigError(GeocpError):
    """A configuration file or shift specification is invalid or incomplete."""


class TrainingError(GeocpError):
    """Model training diverged or was otherwise unable to complete."""


class FormatError(GeocpError):
    """A binary container is malformed; the message names the failing byte offset."""
