"""Exception hierarchy.

Every error carries a stable ``code`` so the CLI can print a single
machine-parsable diagnostic line.
"""

from __future__ import annotations


class MvFuseError(Exception):
    code = "MvFuseError"


class NonPositiveDepth(MvFuseError):
    """Point lies behind or on the camera plane."""

    code = "NonPositiveDepth"


class DegenerateConfiguration(MvFuseError):
    """Source points are collinear or duplicated."""

    code = "DegenerateConfiguration"


class GridTooLarge(MvFuseError):
    code = "GridTooLarge"


class ValidationFailure(MvFuseError):
    code = "ValidationFailure"


class InsufficientKeypoints(MvFuseError):
    """Fewer than three keypoint ids have candidates."""

    code = "InsufficientKeypoints"


class NoCorrespondences(MvFuseError):
    code = "NoCorrespondences"


class PlacementFailure(MvFuseError):
    code = "PlacementFailure"


class ParseError(MvFuseError):
    code = "ParseError"


class SchemaMismatch(MvFuseError):
    code = "SchemaMismatch"
