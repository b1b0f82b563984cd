"""Exception types shared across the package."""


class LitedetError(Exception):
    """Base class for every error raised by litedet."""


class ShapeError(LitedetError, ValueError):
    """A tensor dimension does not satisfy an operation's contract."""

    def __init__(self, message, dim=None, expected=None, actual=None):
        super().__init__(message)
        self.dim = dim
        self.expected = expected
        self.actual = actual


class ConfigError(LitedetError, ValueError):
    """A block or layer was configured with inconsistent hyperparameters."""


class GraphError(LitedetError, ValueError):
    """A model graph failed to parse or validate."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class WeightError(LitedetError, KeyError):
    """A parameter required by a graph node is missing or malformed."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

    def __str__(self):
        return self.args[0]


class CorruptionError(LitedetError, ValueError):
    """A serialized payload failed its integrity checks."""


class PruneError(LitedetError, ValueError):
    """A pruning request or plan is invalid for the given graph."""
