"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes (config 2, data/format 3, numerical 4);
the HTTP service maps them onto status codes. Library code raises them
directly.
"""


class JsmkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(JsmkitError):
    """Invalid configuration: bad parameter values, inconsistent specs."""


class InputError(JsmkitError):
    """Invalid runtime input: shape mismatches, non-finite values, bounds."""


class DataFormatError(JsmkitError):
    """Malformed or unsupported file content."""


class NumericsError(JsmkitError):
    """Computation produced NaN/Inf or otherwise diverged."""
