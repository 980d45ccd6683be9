"""Exception hierarchy shared across the pipeline."""


class WisefuseError(Exception):
    """Base class for all errors raised by this package."""


# -- raster / tiling -------------------------------------------------------

class RasterFormatError(WisefuseError):
    """Input file is not a valid binary PGM/PPM raster."""


class DegenerateHistogram(WisefuseError):
    """Histogram has fewer than two nonzero bins; no threshold exists."""


class SlideTooSmall(WisefuseError):
    """Slide cannot hold a single patch at the requested scale."""


class OutOfBounds(WisefuseError):
    """Patch coordinate lies outside the slide's grid."""


# -- embedding store -------------------------------------------------------

class BadMagic(WisefuseError):
    """Store file does not start with the expected magic bytes."""


class VersionMismatch(WisefuseError):
    """Store file was written with an unsupported format version."""


class Truncated(WisefuseError):
    """Store file ends before the declared record count is reached."""


class ZeroNormVector(WisefuseError):
    """Vector with zero Euclidean norm or non-finite entries rejected."""


class DuplicateId(WisefuseError):
    """Record id already present in the store."""


class MissingChildEmbedding(WisefuseError):
    """A fine patch in the grid has no vector in the high-res store."""


# -- encoder gateway -------------------------------------------------------

class ProviderUnreachable(WisefuseError):
    """Remote encoder endpoint did not answer or answered with an error."""


class DimensionMismatch(WisefuseError):
    """Provider returned vectors of an unexpected dimension."""


class EmptyBatch(WisefuseError):
    """Encode request contains no items."""


class UnsupportedModality(WisefuseError):
    """Provider does not cover the request's modality."""


# -- report selection / prompts -------------------------------------------

class EmptyReportSet(WisefuseError):
    """Class has no report embeddings to rank."""


class EmptyDescriptions(WisefuseError):
    """Class prompt spec carries no morphological sentences."""


# -- distillation ----------------------------------------------------------

class ShapeMismatch(WisefuseError):
    """Head parameters and input vector disagree on dimensions."""


class InsufficientNegatives(WisefuseError):
    """Slide has fewer out-of-region patches than requested."""


# -- selection / fusion ----------------------------------------------------

class EmptyMatrix(WisefuseError):
    """Similarity matrix has no patches."""


class UnknownPatchId(WisefuseError):
    """Patch id does not map to any grid cell."""


class LengthMismatch(WisefuseError):
    """Similarity row length differs from the class-embedding count."""


class MissingEmbedding(WisefuseError):
    """Required patch embedding absent from the store."""


class UnknownParent(WisefuseError):
    """Selected coarse patch has no row in the similarity matrix."""


# -- evalkit / pipeline ----------------------------------------------------

class BadParams(WisefuseError):
    """Synthetic world parameters outside their valid ranges."""


class EmptyTruth(WisefuseError):
    """Ground-truth planted set is empty."""


class DegenerateLabels(WisefuseError):
    """Fewer than two classes present in the training labels."""


class UnknownBaseline(WisefuseError):
    """Benchmark policy name not recognized."""


class ConfigError(WisefuseError):
    """Pipeline configuration invalid (maps to CLI exit code 2)."""


class StageError(WisefuseError):
    """A pipeline stage failed; carries the stage name (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
