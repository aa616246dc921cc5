"""Exception hierarchy shared across the package."""


class PimgError(Exception):
    """Base class for all package errors."""


# --- document / serialization ---

class BadMagic(PimgError):
    pass


class UnsupportedVersion(PimgError):
    pass


class TruncatedChunk(PimgError):
    pass


class InvariantViolation(PimgError):
    pass


# --- ingestion ---

class EmptyMask(PimgError):
    pass


class DimensionMismatch(PimgError):
    pass


# --- boundary fitting ---

class TooFewBoundaryPoints(PimgError):
    pass


class EmptySet(PimgError):
    pass


# --- meshing ---

class SelfIntersectingBoundary(PimgError):
    pass


class DegenerateBoundary(PimgError):
    pass


# --- texture ---

class DegenerateBBox(PimgError):
    pass


class NoVisibleNodes(PimgError):
    pass


class OutsideLayer(PimgError):
    pass


# --- optimization / rendering ---

class NonFiniteLoss(PimgError):
    pass


class UnfittedDocument(PimgError):
    pass


class UnknownLayer(PimgError):
    pass


class ShapeMismatch(PimgError):
    pass


# --- editing ---

class SingularTransform(PimgError):
    pass


class BackgroundImmutable(PimgError):
    pass


class MissingGrid(PimgError):
    pass


# --- animation ---

class UnfittedLayer(PimgError):
    pass


class UnknownParticle(PimgError):
    pass


# --- codec ---

class CorruptStream(PimgError):
    pass
