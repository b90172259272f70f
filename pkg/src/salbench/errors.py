"""Exception types raised across the package.

Every error derives from :class:`SalbenchError` so callers can catch the
whole family; the CLI maps config errors to exit code 2 and everything
else to exit code 1.
"""


class SalbenchError(Exception):
    """Base class for all package errors."""


# --- engine ---------------------------------------------------------------

class ShapeMismatch(SalbenchError):
    """Input or weight shape does not match what a layer expects."""


class NonFinite(SalbenchError):
    """A layer produced NaN or Inf values."""

    def __init__(self, layer_index: int, message: str = ""):
        self.layer_index = layer_index
        super().__init__(message or f"non-finite values produced by layer {layer_index}")


class TraceMismatch(SalbenchError):
    """A forward trace was produced by a different model."""


class ClassOutOfRange(SalbenchError):
    """class_index outside [0, class_count)."""


class InconsistentShapes(SalbenchError):
    """Layer parameters do not chain into a valid model."""

    def __init__(self, layer_index: int, message: str):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


# --- saliency methods -----------------------------------------------------

class ConfigInvalid(SalbenchError):
    """One or more configuration fields are invalid.

    ``problems`` holds per-field diagnostics when more than one field is bad.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NotCamEligible(SalbenchError):
    """Model lacks the global-pool-then-dense tail CAM requires."""


class ParamInvalid(SalbenchError):
    """Method parameters violate their constraints."""


class ShapeInvalid(SalbenchError):
    """A saliency map has unusable dimensions."""


# --- metrics ----------------------------------------------------------------

class PercentOutOfRange(SalbenchError):
    """Percentile outside (0, 100] or not strictly increasing."""


class SingularSystem(SalbenchError):
    """Imputation system has no anchor pixels (everything removed)."""


class LengthMismatch(SalbenchError):
    """Paired sequences have different lengths."""


class EmptyMask(SalbenchError):
    """A mask with no set pixels where one is required."""


class DimMismatch(SalbenchError):
    """Two grids that must be the same size are not."""


class DegenerateReference(SalbenchError):
    """Reference saliency map has no positive mass to binarize."""


# --- slide pipeline ---------------------------------------------------------

class SlideTooSmall(SalbenchError):
    """Slide smaller than one tile."""


class DegeneratePolygon(SalbenchError):
    """Polygon with fewer than 3 vertices."""


class VertexOutOfBounds(SalbenchError):
    """Polygon vertex outside the slide."""


class OutOfBounds(SalbenchError):
    """Tile region exceeds the mask or slide bounds."""


# --- bench ------------------------------------------------------------------

class MethodUnavailable(SalbenchError):
    """Explanation method cannot run on the given model."""


# --- file formats -----------------------------------------------------------

class FormatError(SalbenchError):
    """Bad magic bytes or unsupported format version."""


class CountMismatch(SalbenchError):
    """Weight blob element counts disagree with the file header."""


class SpecInvalid(SalbenchError):
    """Fixture specification is unusable."""


class WriteError(SalbenchError):
    """Output file could not be written."""
