"""Exception hierarchy shared across the package."""


class ZSDError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ZSDError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ContractError(ZSDError, ValueError):
    """Shape mismatch or violated precondition."""


class DataError(ZSDError, ValueError):
    """Dataset content does not satisfy what an operation needs."""


class DegenerateInputError(ZSDError, ValueError):
    """Input that makes a quantity undefined (e.g. coincident noise pairs)."""


class ParseError(ZSDError, ValueError):
    """Malformed file content."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ConfigError(ZSDError, ValueError):
    """Bad configuration key or value."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


class DivergenceError(ZSDError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
