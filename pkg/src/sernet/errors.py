"""Exception hierarchy shared by every subsystem."""


class SerError(Exception):
    """Base class for all package errors."""


class FormatError(SerError, ValueError):
    """A file is truncated or its header/magic is malformed."""


class UnsupportedFormatError(SerError, ValueError):
    """The file is well formed but uses a codec we do not decode."""


class UnsupportedRateError(SerError, ValueError):
    pass


class EmptyInputError(SerError, ValueError):
    pass


class SchemaError(SerError, ValueError):
    """Tabular input (manifest CSV, INI config) misses or misnames a field."""


class ShapeError(SerError, ValueError):
    pass


class ConfigError(SerError, ValueError):
    pass


class CompatibilityError(SerError):
    """A checkpoint was written for a different architecture or front-end."""


class InfeasibleSplitError(SerError, ValueError):
    pass


class FoldError(SerError):
    """A cross-validation fold failed; ``fold`` holds its index."""

    def __init__(self, fold: int, message: str):
        super().__init__(f"fold {fold}: {message}")
        self.fold = fold
