"""Exception types shared across the package."""


class RoadBevError(Exception):
    """Base class for all package errors."""


class DomainError(RoadBevError, ValueError):
    """A value is outside its documented domain."""


class FrameMismatchError(RoadBevError, ValueError):
    """A point batch was handed to a transform with a different source frame."""


class ContractError(RoadBevError, ValueError):
    """Incompatible shapes or arguments between cooperating components."""


class DataError(RoadBevError, ValueError):
    """Input data violates an invariant (NaN under a valid mask, corrupt file)."""


class TrainingError(RoadBevError, RuntimeError):
    """Training cannot proceed (e.g. NaN gradients)."""


class EvaluationError(RoadBevError, ValueError):
    """Evaluation is undefined for the given inputs."""


class ConfigError(RoadBevError, ValueError):
    """Run configuration failed validation."""
