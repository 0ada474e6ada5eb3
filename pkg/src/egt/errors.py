"""Exception types shared across the package."""


class EGTError(Exception):
    """Base class for all package errors."""


class ConfigError(EGTError, ValueError):
    """An invalid configuration or argument value."""


class ShapeError(EGTError, ValueError):
    """Array dimensions that do not agree."""


class FormatError(EGTError):
    """A binary artifact that cannot be decoded."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class PatternError(EGTError, ValueError):
    """An N:M pattern that is unsupported or violated."""


class TrieError(EGTError):
    pass


class DecodeError(EGTError):
    pass
