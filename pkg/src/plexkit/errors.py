"""Exception types shared across the pipeline."""


class PlexkitError(Exception):
    """Base class for all pipeline errors."""


class NoTissue(PlexkitError):
    """Too few pixels above the optical-density threshold to fit stains."""


class DegenerateStains(PlexkitError):
    """Estimated stain vectors are (near-)collinear."""


class ZeroDimension(PlexkitError):
    """An image operation would produce an empty image."""


class TooSmall(PlexkitError):
    """Tile size exceeds an image dimension."""


class OutOfBounds(PlexkitError):
    """Tile window extends past the image border."""


class InsufficientClass(PlexkitError):
    """A slide has fewer tiles of a class than the sample plan requires."""

    def __init__(self, label_name: str, available: int, requested: int):
        super().__init__(
            f"class '{label_name}' has only {available} tiles, "
            f"{requested} requested"
        )
        self.label_name = label_name
        self.available = available
        self.requested = requested


class ZeroVector(PlexkitError):
    """Vector norm below tolerance where a direction is required."""


class BadMagic(PlexkitError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(PlexkitError):
    """File format version not supported by this reader."""


class TruncatedFile(PlexkitError):
    """File ends before the declared payload is complete."""


class DimMismatch(PlexkitError):
    """Embedding dimension inconsistent within a file or between inputs."""


class ShapeMismatch(PlexkitError):
    """Parameter and gradient structures do not line up."""


class EmptyDataset(PlexkitError):
    """Training or evaluation invoked with no bags."""


class NonFiniteLoss(PlexkitError):
    """Loss became NaN or infinite during training."""


class LengthMismatch(PlexkitError):
    """Prediction and label sequences differ in length."""


class OneClassOnly(PlexkitError):
    """ROC-AUC needs at least one positive and one negative."""


class IndivisibleCount(PlexkitError):
    """Slide count is not divisible by the number of folds."""
