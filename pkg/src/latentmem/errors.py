"""Exception taxonomy shared by every subsystem."""


class LatentMemError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentMemError):
    """Tensor shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes) -> None:
        super().__init__(f"{op}: incompatible shapes {shapes}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(LatentMemError):
    """A NaN or Inf entered a computation that requires finite values."""


class ContractError(LatentMemError):
    """A caller violated an operation precondition."""


class ConfigError(LatentMemError):
    """Invalid configuration value or combination."""


class ArtifactError(LatentMemError):
    """A required on-disk artifact is missing or unreadable."""


class InvariantError(LatentMemError):
    """A runtime invariant check failed; the run must abort."""
