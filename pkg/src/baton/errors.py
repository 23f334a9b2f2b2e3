"""Exception hierarchy.

Every error raised by the package derives from :class:`BatonError`; the
CLI maps the families below onto exit codes.
"""


class BatonError(Exception):
    pass


class InvalidShapeError(BatonError, ValueError):
    pass


class DegenerateMaskError(BatonError, ValueError):
    pass


class TrainingDivergenceError(BatonError, FloatingPointError):
    pass


class InvalidPositionError(BatonError, ValueError):
    pass


class ConfigurationError(BatonError, ValueError):
    pass


class AssemblyError(BatonError, ValueError):
    pass


class LayoutError(BatonError, ValueError):
    pass


class VocabError(BatonError, KeyError):
    pass


class ExtractionError(BatonError, IndexError):
    pass


class AlignmentError(BatonError, ValueError):
    pass


class TowerError(BatonError, ValueError):
    pass


class LossError(BatonError, ValueError):
    pass


class PatchingError(BatonError, ValueError):
    pass


class WindowingError(BatonError, ValueError):
    pass


class EncodingError(BatonError, ValueError):
    pass


class ProjectionError(BatonError, ValueError):
    pass


class RangeError(BatonError, ValueError):
    pass


class DivergenceError(BatonError, FloatingPointError):
    """Non-finite state while integrating the sampling ODE."""

    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite sampler state at step {step}")
        self.step = step


class EvaluationError(BatonError, ValueError):
    pass


class FormatError(BatonError, OSError):
    """Corrupt or truncated tensor container."""


class IncompatibleCheckpointError(BatonError, ValueError):
    pass


class UsageError(BatonError, ValueError):
    pass
