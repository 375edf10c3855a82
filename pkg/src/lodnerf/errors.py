"""Typed exceptions shared across the package.

Every error that callers are expected to catch has its own class so that
the service layer and the CLI can map failures to stable codes without
string matching.
"""


class LodnerfError(Exception):
    """Base class for all package errors."""


# -- geometry ---------------------------------------------------------------

class RayMissesScene(LodnerfError):
    """A ray does not intersect the scene root bounding box."""


class NonPositiveDepth(LodnerfError):
    """Sphere radius requested at depth <= 0."""


# -- octree -----------------------------------------------------------------

class PointOutsideScene(LodnerfError):
    """A query or observation point lies outside the root bounding box."""


class EmptyObservations(LodnerfError):
    """Pruning was asked to run with no observations at all."""


class UnknownNode(LodnerfError):
    """A node id that is not part of the tree."""


# -- field ------------------------------------------------------------------

class OutOfNodeBounds(LodnerfError):
    """A local coordinate falls outside a node's unit cube."""


# -- train ------------------------------------------------------------------

class LengthMismatch(LodnerfError):
    """Weights and intervals passed to a loss do not line up."""


class NonFiniteLoss(LodnerfError):
    """Training produced a NaN or infinite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ImageTooSmall(LodnerfError):
    """An image is too small for the requested number of pyramid levels."""


# -- distrib ----------------------------------------------------------------

class NoSubtreesAtLevel(LodnerfError):
    """The retained tree has no nodes at the requested split level."""


class EmptyMask(LodnerfError):
    """A worker's pixel masks cover no pixels in any image."""


class OwnershipViolation(LodnerfError):
    """A simulated worker touched parameters of a subtree it does not own."""


# -- scene_io ---------------------------------------------------------------

class ParseError(LodnerfError):
    """Malformed input file; message carries file and line number."""

    def __init__(self, path, line_no: int | None, message: str):
        loc = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{loc}: {message}")
        self.path = str(path)
        self.line_no = line_no


class UnsupportedCameraModel(LodnerfError):
    """Camera model other than PINHOLE/SIMPLE_PINHOLE."""


class PointBehindCamera(LodnerfError):
    """A sparse point projects behind its observing camera."""


class UnknownSceneSpec(LodnerfError):
    """Synthetic scene name not recognised."""


class VersionMismatch(LodnerfError):
    """Serialized tree was written with an incompatible format version."""


class ChecksumMismatch(LodnerfError):
    """A parameter blob failed its CRC32 check."""
