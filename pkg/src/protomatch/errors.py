"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for every error raised by this package."""


class BadMagicError(ToolkitError):
    """File does not start with the expected container magic."""


class HeaderParseError(ToolkitError):
    """Container header is not valid JSON or violates the header contract."""


class PayloadSizeMismatchError(ToolkitError):
    """Container payload length disagrees with the header shape."""


class PayloadInvalidError(ToolkitError):
    """Container payload holds values the toolkit cannot accept (NaN/Inf, bad norms)."""


class IoFailureError(ToolkitError):
    """Underlying OS write failed."""


class DimMismatchError(ToolkitError):
    """Embedding dimensions of two artifacts disagree."""


class DecodeError(ToolkitError):
    """PNG or JSON input could not be decoded into the expected structure."""


class UnknownClassNameError(ToolkitError):
    """A class name or label id is not part of the declared class inventory."""


class MissingPathError(ToolkitError):
    """A referenced file does not exist."""


class ImageTooSmallError(ToolkitError):
    """Image is smaller than one patch in at least one axis."""


class BackendUnavailableError(ToolkitError):
    """The selected extractor backend cannot produce features for this image."""


class EmptySourceMaskError(ToolkitError):
    """Instance mask has no foreground pixels inside the token-covered region."""


class EmptyTokenMaskError(ToolkitError):
    """Token mask selects no tokens."""


class ZeroVectorError(ToolkitError):
    """Vector norm is too small to normalize."""


class NoInstancesForClassError(ToolkitError):
    """A declared class yielded no usable instance embedding."""


class ShapeMismatchError(ToolkitError):
    """Array shapes disagree."""


class ThresholdOutOfRangeError(ToolkitError):
    """Threshold outside the closed unit interval."""


class EmptyProposalMaskError(ToolkitError):
    """Proposal mask has no foreground pixels, so a majority vote is undefined."""


class EmptyGroundTruthError(ToolkitError):
    """No positive ground-truth pixels in the evaluation set; ranking metrics are undefined."""


class ConfigError(ToolkitError):
    """Run configuration is invalid."""


class MissingInferenceError(ToolkitError):
    """Requested rendering needs inference outputs that do not exist yet."""
