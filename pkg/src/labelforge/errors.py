"""Exception types raised across the package."""


class LabelforgeError(Exception):
    """Base class; the CLI maps every subclass to exit status 2."""


class VolumeFormatError(LabelforgeError, ValueError):
    pass


class UnsupportedFormatError(VolumeFormatError):
    pass


class CorruptLabelError(VolumeFormatError):
    pass


class ShapeError(VolumeFormatError):
    pass


class SchemeValidationError(LabelforgeError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DegenerateFitError(LabelforgeError, ValueError):
    pass


class GeometryMismatchError(LabelforgeError, ValueError):
    pass


class UnmappedLabelError(LabelforgeError, ValueError):
    def __init__(self, source, ids):
        super().__init__(f"source {source!r} has unmapped label ids {sorted(ids)}")
        self.source = source
        self.ids = sorted(ids)


class PhantomSpecError(LabelforgeError, ValueError):
    pass


class BinRangeError(LabelforgeError, ValueError):
    pass
