"""Exception types shared across the package."""


class JointMapError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(JointMapError):
    """Array dimensions do not line up for the requested operation."""


class ConfigError(JointMapError):
    """A configuration value is out of its documented range."""


class DataError(JointMapError):
    """Malformed or inconsistent input data."""


class StoreError(JointMapError):
    """Parameter store is in an inconsistent state (e.g. missing gradients)."""


class ProtocolError(JointMapError):
    """A caller-supplied callable violated its contract."""


class ParseError(JointMapError):
    """A persisted file failed to parse; carries the offending location."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no
        self.reason = message
