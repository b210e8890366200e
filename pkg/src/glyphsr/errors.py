"""Exception types shared across the package."""


class GlyphSrError(Exception):
    """Base class for all package-specific errors."""


class DegenerateTriangle(GlyphSrError):
    """Three points that were expected to span a triangle are collinear."""


class SingularTransform(GlyphSrError):
    """An affine transform whose linear part cannot be inverted."""


class ShapeMismatch(GlyphSrError):
    """Array arguments disagree on shape where equality is required."""


class GapBetweenTiles(GlyphSrError):
    """Tile stitching found columns covered by no tile."""


class UnknownGlyph(GlyphSrError):
    """A character has no bitmap in the glyph atlas."""


class InvalidRange(GlyphSrError):
    """A numeric range parameter is out of its documented bounds."""


class NonFiniteLoss(GlyphSrError):
    """The training loss evaluated to NaN or infinity."""


class NonFiniteActivation(GlyphSrError):
    """A network activation became non-finite during training."""


class EmptyEvalSet(GlyphSrError):
    """A metric was requested over zero prediction/target pairs."""


class IOFailure(GlyphSrError):
    """A file could not be read or written."""


class ArtifactMismatch(GlyphSrError):
    """A checkpoint or config does not match what the caller expects."""


class ConfigError(GlyphSrError):
    """A run configuration document failed validation."""
