"""Exception types shared across the engine.

Class names match the documented error identifiers of the public API, so
callers can catch them by contract name.
"""
from __future__ import annotations


class FpssError(Exception):
    """Base class for every error raised by this package."""


# --- tensor file IO ---------------------------------------------------------

class MagicMismatch(FpssError):
    """File does not start with the FPSS magic bytes."""


class UnsupportedVersion(FpssError):
    """Header version is not one this reader understands."""


class TruncatedPayload(FpssError):
    """Payload byte count does not match the header dimensions."""


class NonFiniteValue(FpssError):
    """A float payload contains NaN or infinity."""


# --- dense-grid operations --------------------------------------------------

class ZeroMass(FpssError):
    """A probability map with no mass cannot be renormalized."""


class DimensionMismatch(FpssError):
    """Grids that must share dimensions do not."""


# --- ingest -----------------------------------------------------------------

class SchemaViolation(FpssError):
    """Manifest JSON does not match the manifest schema."""


class UnknownDomain(FpssError):
    """Manifest domain is not one of the five dataset groups."""


class DuplicateId(FpssError):
    """Manifest contains a repeated class or image identifier."""


class NoEligibleReference(FpssError):
    """No other image in the manifest can serve as a visual prompt."""


class EmptyClassName(FpssError):
    """Text prompts cannot be built from an empty class name."""


# --- matching ---------------------------------------------------------------

class EmptyMaskAfterDownsample(FpssError):
    """Reference mask has no cells once resampled to the feature grid."""


class EmptyProposalAfterDownsample(FpssError):
    """Proposal mask has no cells once resampled to the feature grid."""


class DepthMismatch(FpssError):
    """Feature depth differs between prototypes and target features."""


# --- proposal decoding ------------------------------------------------------

class PointOutOfBounds(FpssError):
    """A prompt point lies outside the grid it indexes."""


class NoCoveringProposal(FpssError):
    """No stored candidate mask contains any of the prompt points."""


# --- fusion -----------------------------------------------------------------

class MissingReferenceTPMask(FpssError):
    """Selection needs the text-branch mask of the reference image."""


# --- evaluation -------------------------------------------------------------

class NoRecords(FpssError):
    """Aggregation was asked to run over an empty record set."""


class DatasetMismatch(FpssError):
    """The two method reports do not cover identical datasets."""


class AlignmentMismatch(FpssError):
    """The two record sets are not aligned on (dataset, class, image)."""
