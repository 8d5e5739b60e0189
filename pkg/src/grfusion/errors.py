"""Exception hierarchy shared by every grfusion module."""


class GRFusionError(Exception):
    """Base class for all library errors."""


class ArityError(GRFusionError):
    """Wrong number of source images for the requested operation."""


class StackShapeError(GRFusionError):
    """Source images do not share the same height and width."""


class ImageReadError(GRFusionError, OSError):
    """An image file could not be read or decoded."""


class ParamError(GRFusionError, ValueError):
    """A scalar parameter is outside its valid range."""


class ConfigError(GRFusionError, ValueError):
    """A network or training configuration is internally inconsistent."""


class DomainError(GRFusionError, ValueError):
    """An array holds values outside the domain required by the operation."""


class ConsistencyError(GRFusionError):
    """Decision maps and hard-pixel mask disagree."""


class UntrainedModelError(GRFusionError):
    """Inference was requested from a network that was never trained."""


class DependencyError(GRFusionError):
    """A training stage was started before the stage it depends on."""


class MetricError(GRFusionError, ValueError):
    """Inputs cannot be scored by a fusion metric."""
