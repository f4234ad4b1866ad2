"""Exception types shared across the package."""


class MoepackError(Exception):
    """Base class for all package errors."""


class ConfigError(MoepackError):
    """Invalid configuration file or parameter combination."""


class CorruptionError(MoepackError):
    """A serialized artifact failed validation (truncation, bad magic,
    inconsistent offsets, or a decode that does not come out to the
    declared shape)."""


class DictionaryMismatchError(MoepackError):
    """The checkpoint was encoded against a different dictionary than the
    one supplied for decoding."""


class TierCapacityError(MoepackError):
    """A staging request would overflow the fast tier."""
