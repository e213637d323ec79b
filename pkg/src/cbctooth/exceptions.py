"""Error hierarchy.

Every error carries a ``stage`` (the pipeline step that raised it) and an
``exit_code`` used by the command-line front end.
"""


class CbctError(Exception):
    exit_code = 1
    default_stage = None

    def __init__(self, message, stage=None, **details):
        super().__init__(message)
        self.stage = stage or self.default_stage
        self.details = details

    def to_dict(self):
        out = {"error": type(self).__name__, "stage": self.stage, "message": str(self)}
        if self.details:
            out["details"] = self.details
        return out


class VolumeFormatError(CbctError):
    """Raw/sidecar file problems: missing sidecar, size mismatch, bad spacing."""

    exit_code = 10
    default_stage = "io"


class DegenerateHistogramError(CbctError):
    exit_code = 11
    default_stage = "histogram"


class NotSeparableError(CbctError):
    """Too few nonempty histogram bins for the requested number of classes."""

    exit_code = 12
    default_stage = "otsu"


class JawsNotSeparatedError(CbctError):
    exit_code = 13
    default_stage = "split_jaws"


class SkeletonError(CbctError):
    exit_code = 14
    default_stage = "skeletonize"


class CurveFitError(CbctError):
    exit_code = 15
    default_stage = "fit_reference_curve"


class GeometryError(CbctError):
    exit_code = 16
    default_stage = "render_panorama"


class EmptyDomainError(CbctError):
    exit_code = 17
    default_stage = "roi_extraction"


class SchemaError(CbctError):
    """Provider or file output violating a documented schema or invariant."""

    exit_code = 18
    default_stage = "provider"


class ProviderError(CbctError):
    exit_code = 19
    default_stage = "provider"


class SpecInvalidError(CbctError):
    exit_code = 20
    default_stage = "phantom"


class ConfigError(CbctError):
    exit_code = 21
    default_stage = "config"


class SequenceAnomalyWarning(UserWarning):
    """Detected class sequence is not monotone from the midline outward."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(indices)


class CapacityWarning(UserWarning):
    """More teeth of one class in a quadrant than FDI numbering allows."""


class InfiniteLossWarning(UserWarning):
    """A zero probability hit a positive label; the log was clamped."""
