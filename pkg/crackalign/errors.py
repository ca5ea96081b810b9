"""Exception hierarchy shared by every stage of the alignment pipeline."""


class CrackAlignError(Exception):
    """Root of all library errors."""


class ImageFormatError(CrackAlignError, ValueError):
    """Unreadable, unsupported or zero-size image."""


class ImageTooSmallError(CrackAlignError, ValueError):
    pass


class DimensionMismatchError(CrackAlignError, ValueError):
    pass


class DegenerateConfigurationError(CrackAlignError, ValueError):
    """Point configuration or matrix that admits no unique projective solution."""


class KeypointOutOfBoundsError(CrackAlignError, ValueError):
    """Descriptor window falls outside the image."""


class InsufficientMatchesError(CrackAlignError, ValueError):
    pass


class RansacFailure(CrackAlignError, RuntimeError):
    """No hypothesis gathered at least four inliers."""


class ConfigError(CrackAlignError, ValueError):
    pass
