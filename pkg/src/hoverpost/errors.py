"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`HoverpostError`, so callers can catch one base class at pipeline
boundaries while tests assert on the precise subclass.
"""


class HoverpostError(Exception):
    """Base class for all errors raised by this package."""


class BadMagic(HoverpostError):
    """File is not an array file we can read (magic/version/header)."""


class UnsupportedDtype(HoverpostError):
    """Array dtype outside the supported on-disk set."""


class TruncatedPayload(HoverpostError):
    """Array file ends before the declared payload does."""


class CorruptLabels(HoverpostError):
    """Label data fails an exactness check (e.g. fractional label values)."""


class IoFailure(HoverpostError):
    """Underlying OS write/read failed."""


class ShapeMismatch(HoverpostError):
    """Arrays that must agree in shape do not."""


class MissingClass(HoverpostError):
    """An instance label has no entry in the class table."""


class AllZeroCounts(HoverpostError):
    """Class weights requested for a histogram with no nuclei at all."""


class NonFinite(HoverpostError):
    """NaN or infinity where finite values are required."""


class LabelOutOfRange(HoverpostError):
    """A class label lies outside [0, num_classes)."""


class MarkerOutsideMask(HoverpostError):
    """A watershed marker pixel falls outside the foreground mask."""


class UnknownClass(HoverpostError):
    """A class id that cannot exist (non-positive) was requested."""


class UnmappedClass(HoverpostError):
    """A class id has no row in the remapping table."""
