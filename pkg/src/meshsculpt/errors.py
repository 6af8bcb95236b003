"""Exception types shared across the toolkit."""


class MeshSculptError(Exception):
    """Base class for all toolkit errors."""


class MeshFormatError(MeshSculptError):
    """Mesh file cannot be parsed or violates the format contract."""


class TopologyError(MeshSculptError):
    """Invalid mesh topology (bad indices, disconnected graph, ...)."""


class HierarchyError(MeshSculptError):
    """Hierarchy construction or cache failure."""


class CheckpointError(MeshSculptError):
    """Corrupt or unreadable checkpoint file."""


class TopologyMismatch(MeshSculptError):
    """Model and mesh disagree on template topology."""


class ConfigError(MeshSculptError):
    """Invalid configuration value."""


class TrainingDiverged(MeshSculptError):
    """Training loss became non-finite or grew past the divergence guard."""
