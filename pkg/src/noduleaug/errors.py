"""Exception types shared across the pipeline."""


class NoduleAugError(Exception):
    """Base class for all pipeline errors."""


class InvalidArgumentError(NoduleAugError, ValueError):
    """An argument violates an operation's precondition."""


class OutOfBoundsError(NoduleAugError):
    """A coordinate, box, or placement escapes the volume it refers to."""


class ConsistencyError(NoduleAugError):
    """Two artifacts that must agree (scan ids, condition tables, ...) do not."""


class CapacityError(NoduleAugError):
    """A resource pool cannot satisfy the request (packing, item pools)."""


class ConfigurationError(NoduleAugError):
    """A run configuration is unusable (empty split, bad ratios, ...)."""


class NonFiniteLossError(NoduleAugError):
    """Training produced a non-finite loss; a diagnostic snapshot was written."""

    def __init__(self, message: str, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class DependencyError(NoduleAugError):
    """A required upstream artifact is missing; names the producing subcommand."""

    def __init__(self, message: str, producer: str):
        super().__init__(message)
        self.producer = producer


class SequencingError(NoduleAugError):
    """An operation arrived out of order (answer for a non-current item, ...)."""
