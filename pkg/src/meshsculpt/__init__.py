"""Localized mesh editing with masked diffusion on fixed-topology triangle meshes."""

__version__ = "0.1.0"

from .errors import (
    MeshSculptError,
    MeshFormatError,
    TopologyError,
    HierarchyError,
    CheckpointError,
    TopologyMismatch,
    ConfigError,
    TrainingDiverged,
)

__all__ = [
    "MeshSculptError",
    "MeshFormatError",
    "TopologyError",
    "HierarchyError",
    "CheckpointError",
    "TopologyMismatch",
    "ConfigError",
    "TrainingDiverged",
    "__version__",
]
