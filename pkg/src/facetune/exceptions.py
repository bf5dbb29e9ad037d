"""Exception types shared across the package."""


class FaceTuneError(Exception):
    """Base class for all package errors."""


class MeshFormatError(FaceTuneError, ValueError):
    """A mesh file could not be parsed or violates the mesh invariants."""


class TopologyError(FaceTuneError, ValueError):
    """Mesh topology is unsuitable (non-manifold, mismatched, stuck decimation)."""


class ShapeError(FaceTuneError, ValueError):
    """Tensor or array shapes are incompatible."""


class GradientError(FaceTuneError, RuntimeError):
    """Misuse of the gradient tape (consumed graph, missing gradients, ...)."""


class NumericalError(FaceTuneError, FloatingPointError):
    """A loss or metric became non-finite."""


class ConfigError(FaceTuneError, ValueError):
    """Run or architecture configuration is invalid or mismatched."""
