"""Exception hierarchy shared by every stage of the garment dynamics toolkit.

Every error carries a short machine-readable ``category`` so the CLI can print
``error[<category>]: <message>`` and pick an exit code without string matching.
"""

from typing import Optional


class GarmentDynamicsError(ValueError):
    """Base class for all errors raised by this package."""

    category = "internal"


class ConfigError(GarmentDynamicsError):
    """Malformed configuration file, bad flag combination, or missing input."""

    category = "usage"


class MeshError(GarmentDynamicsError):
    """Invalid or degenerate triangle mesh."""

    category = "mesh"

    def __init__(self, message: str, face: Optional[int] = None):
        super().__init__(message)
        self.face = face


class SolverError(GarmentDynamicsError):
    """Sparse factorization or solve failed."""

    category = "solver"

    def __init__(self, message: str, component: Optional[int] = None):
        super().__init__(message)
        self.component = component


class ColliderError(GarmentDynamicsError):
    category = "collider"


class FeatureError(GarmentDynamicsError):
    category = "features"


class ModelError(GarmentDynamicsError):
    """Network configuration, checkpoint or activation failure."""

    category = "model"

    def __init__(self, message: str, layer: Optional[str] = None):
        super().__init__(message)
        self.layer = layer


class PipelineError(GarmentDynamicsError):
    """A frame prediction aborted; ``stage`` names where."""

    category = "pipeline"

    def __init__(self, message: str, stage: str, frame: Optional[int] = None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.frame = frame


class SimulationError(GarmentDynamicsError):
    category = "simulation"

    def __init__(self, message: str, frame: Optional[int] = None):
        super().__init__(message)
        self.frame = frame


class TrainingError(GarmentDynamicsError):
    category = "training"

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class ArchiveError(GarmentDynamicsError):
    """Missing, corrupt or inconsistent files on disk."""

    category = "archive"


# Exit codes used by the CLI; anything not listed exits with 1.
EXIT_CODES = {
    "usage": 2,
    "archive": 3,
    "mesh": 4,
    "solver": 4,
    "collider": 4,
    "features": 4,
    "model": 4,
    "pipeline": 4,
    "simulation": 4,
    "training": 4,
}
