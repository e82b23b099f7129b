"""Exception hierarchy shared by every otalign module."""


class OTAlignError(Exception):
    """Base class for all errors raised by otalign."""


class ConfigError(OTAlignError, ValueError):
    """Invalid or inconsistent configuration.

    ``field`` carries the dotted path of the offending config key when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class InputError(OTAlignError, ValueError):
    """Array arguments with the wrong shape, range or content."""


class UsageError(OTAlignError, RuntimeError):
    """API called out of order, e.g. backward without a cached forward pass."""


class ParseError(OTAlignError, ValueError):
    """Malformed feature file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix += f"{path}"
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)


class DegenerateAlignmentError(OTAlignError, RuntimeError):
    """No admissible coupling exists (every hard weight is zero)."""
