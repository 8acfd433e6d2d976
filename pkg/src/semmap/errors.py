"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or image shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A network / pipeline configuration is invalid."""


class LabelError(ValueError):
    """A label index is outside the valid class range."""


class GraphStateError(RuntimeError):
    """Backward called before forward, or a stale recurrent state was reused."""


class AssociationError(IndexError):
    """An association map entry points outside the previous frame."""


class TrackingLostError(RuntimeError):
    """ICP could not find enough valid correspondences."""


class GenerationError(RuntimeError):
    """Scene generation failed (e.g. object placement did not converge)."""
