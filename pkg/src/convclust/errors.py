"""Exception types shared across the package."""


class ConvClustError(Exception):
    """Base class for all convclust errors."""


# Dataset files and sampling.

class MalformedHeaderError(ConvClustError):
    """File header does not match the expected magic number."""


class CountMismatchError(ConvClustError):
    """Image and label counts disagree."""


class TruncatedError(ConvClustError):
    """File holds fewer bytes than its header or layout promises."""


class LabelOutOfRangeError(ConvClustError):
    """A label value falls outside the documented range."""


class NotDivisibleError(ConvClustError):
    """A count that must divide evenly does not."""


class InsufficientClassSamplesError(ConvClustError):
    """A class has fewer samples than the requested per-class draw."""


class PatchTooLargeError(ConvClustError):
    """Requested patch side exceeds the image extent."""


class WindowTooLargeError(ConvClustError):
    """Requested window side exceeds the image extent."""


# Numerics.

class ShapeMismatchError(ConvClustError):
    """Operand shapes do not compose."""


class SchemeMismatchError(ConvClustError):
    """A group scheme does not match the channel layout it is applied to."""


class DegenerateCovarianceError(ConvClustError):
    """Covariance eigendecomposition failed or is unusable."""


class InsufficientPatchesError(ConvClustError):
    """Too few (distinct) patches to initialize a dictionary."""


class DivergedLossError(ConvClustError):
    """Training loss became non-finite."""


class NonPositiveDivisorError(ConvClustError):
    """Dictionary scaling divisor must be positive."""


class UnsupportedChannelsError(ConvClustError):
    """Mosaic export supports one- and three-channel filters only."""


# Artifact files and pipeline staging.

class BadMagicError(ConvClustError):
    """Artifact file does not start with the expected magic string."""


class VersionUnsupportedError(ConvClustError):
    """Artifact format version is not understood by this build."""


class PayloadLengthMismatchError(ConvClustError):
    """Artifact payload length disagrees with its shape header."""


class MissingPrerequisiteError(ConvClustError):
    """A pipeline stage was invoked before its input artifacts exist."""


class ConfigHashMismatchError(ConvClustError):
    """An existing artifact was produced by a different configuration."""
