"""Exception types shared across the package."""


class AmnarError(Exception):
    """Base class for all domain errors raised by this package."""


class FormatError(AmnarError):
    """A file does not conform to its declared format.

    Carries the path and, for binary files, the byte offset of the
    offending content.
    """

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        loc = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{loc}: {message}")


class InvalidSegmentError(AmnarError):
    """A segment is empty or lies outside the feature matrix bounds."""


class InvalidNodeError(AmnarError):
    """A node id is outside the task graph's class range."""


class ConfigError(AmnarError):
    """A configuration value violates its documented constraints."""


class MissingCenterError(AmnarError):
    """A candidate action class has no cluster center."""

    def __init__(self, label):
        self.label = label
        super().__init__(f"no cluster center for action class {label}")


class NoCandidateError(AmnarError):
    """Matching was attempted against an empty candidate set."""


class MissingThresholdError(AmnarError):
    """A segment's action class has no calibrated threshold."""


class UndefinedMetricError(AmnarError):
    """A metric has no defined value on the given inputs."""


class TrainingDivergedError(AmnarError):
    """Training produced a non-finite loss."""
