"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GantuneError`.
The CLI maps these to exit code 1 (user error); anything else is exit code 2.
"""


class GantuneError(Exception):
    """Base class for all expected, user-facing failures."""


class ConfigurationError(GantuneError, ValueError):
    pass


class ShapeError(GantuneError, ValueError):
    pass


class InjectionError(GantuneError, KeyError):
    def __str__(self):
        # KeyError.__str__ repr-quotes the message
        return Exception.__str__(self)


class SearchError(GantuneError, RuntimeError):
    pass


class SelectionError(GantuneError, ValueError):
    pass


class EmbedderError(GantuneError, RuntimeError):
    pass


class TrainingError(GantuneError, RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class MetricError(GantuneError, ValueError):
    pass


class DatasetError(GantuneError, OSError):
    pass


class CheckpointError(GantuneError, OSError):
    pass


class IntegrityError(CheckpointError):
    pass


class CompatibilityError(CheckpointError):
    pass
