"""Exception types raised across the package.

Everything derives from :class:`CausalChipsError`; the CLI maps these to
exit code 2 (data error).
"""


class CausalChipsError(Exception):
    """Base class for data and input errors."""


class EmptyInput(CausalChipsError):
    pass


class DimMismatch(CausalChipsError):
    pass


# -- rasters / chips --------------------------------------------------------

class UnsupportedFormat(CausalChipsError):
    pass


class MissingGeoTags(CausalChipsError):
    pass


class CorruptFile(CausalChipsError):
    pass


class PointOutsideRaster(CausalChipsError):
    pass


class WindowClipped(CausalChipsError):
    pass


# -- record files -----------------------------------------------------------

class DuplicateKey(CausalChipsError):
    pass


class KeyNotFound(CausalChipsError, KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return f"key not found: {self.key!r}"


class CrcMismatch(CausalChipsError):
    def __init__(self, message, ordinal=None):
        super().__init__(message)
        self.ordinal = ordinal


class TruncatedFile(CausalChipsError):
    pass


# -- embeddings -------------------------------------------------------------

class ImageTooSmall(CausalChipsError):
    pass


class ChannelMismatch(CausalChipsError):
    pass


class SequenceTooShort(CausalChipsError):
    pass


class HeterogeneousDims(CausalChipsError):
    pass


# -- estimation -------------------------------------------------------------

class Separation(CausalChipsError):
    pass


class DegenerateFeatures(CausalChipsError):
    pass


class TooFewUnits(CausalChipsError):
    pass


class NoTreated(CausalChipsError):
    pass


class NoControl(CausalChipsError):
    pass


class DegenerateResample(CausalChipsError):
    pass


class AllDropped(CausalChipsError):
    pass


class EmptyCluster(CausalChipsError):
    pass


class NonConvergence(CausalChipsError):
    pass
