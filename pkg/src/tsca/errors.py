"""Exception hierarchy shared by every module of the engine."""


class TSCAError(Exception):
    """Base class for all engine errors."""


class InvalidConfig(TSCAError, ValueError):
    pass


class InvalidOffset(TSCAError, ValueError):
    pass


class DistanceOutOfTable(TSCAError, IndexError):
    pass


class EmptyRow(TSCAError, ValueError):
    pass


class CacheDesync(TSCAError, RuntimeError):
    pass


class ChunkSizeMismatch(TSCAError, ValueError):
    pass


class SessionClosed(TSCAError, RuntimeError):
    pass


class SessionOpen(TSCAError, RuntimeError):
    pass


class HeterogeneousConfig(TSCAError, ValueError):
    pass


class DegenerateInput(TSCAError, ValueError):
    pass


class FormatError(TSCAError, ValueError):
    """A file did not match its binary or text layout."""
