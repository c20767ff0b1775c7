"""Exception hierarchy shared by every plaquekit module."""


class PlaquekitError(Exception):
    """Base class for all errors raised by plaquekit."""


# raster
class WrongColorspace(PlaquekitError):
    pass


class DimensionMismatch(PlaquekitError):
    pass


class ChannelCountMismatch(PlaquekitError):
    pass


# stain normalization
class DegenerateTarget(PlaquekitError):
    """The reference image carries no usable stain signal."""


class DegenerateSource(PlaquekitError):
    pass


class InsufficientTissue(PlaquekitError):
    """Fewer tissue pixels than the stain estimators need."""


class SingularBasis(PlaquekitError):
    pass


# frequency enhancement
class NonRealResult(PlaquekitError):
    """Inverse transform left an imaginary residue above tolerance."""


# patch pipeline
class MalformedXml(PlaquekitError):
    pass


class EmptyAnnotationSet(PlaquekitError):
    pass


class SlideTooSmall(PlaquekitError):
    pass


class AnnotationTooLarge(PlaquekitError):
    pass


class OverlappingSplit(PlaquekitError):
    pass


class UnassignedSubject(PlaquekitError):
    pass


# metrics
class InvalidThreshold(PlaquekitError):
    pass


class EmptySamples(PlaquekitError):
    pass


class EmptyInput(PlaquekitError):
    pass


class UnpairedFiles(PlaquekitError):
    pass
