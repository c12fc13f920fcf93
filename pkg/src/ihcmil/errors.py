"""Domain error hierarchy.

Every failure mode that callers are expected to branch on gets its own class;
everything derives from :class:`IhcMilError` so the CLI can map domain errors
to exit code 1 uniformly.
"""

from __future__ import annotations


class IhcMilError(Exception):
    """Base class for all domain errors."""


# slide-io
class DegenerateHistogram(IhcMilError):
    """All histogram mass sits at a single level; no threshold splits it."""


class MissingSlide(IhcMilError):
    pass


class DuplicatePatient(IhcMilError):
    pass


class MalformedManifest(IhcMilError):
    pass


# stain-features
class SingularStainMatrix(IhcMilError):
    pass


class WrongPatchSize(IhcMilError):
    pass


class BadMagic(IhcMilError):
    pass


class VersionMismatch(IhcMilError):
    pass


class TruncatedFile(IhcMilError):
    pass


class NonFiniteValue(IhcMilError):
    pass


# attention-mil
class DimensionMismatch(IhcMilError):
    pass


class NonFiniteGradient(IhcMilError):
    pass


class SingleClassTraining(IhcMilError):
    pass


# pipeline
class SingleClassCohort(IhcMilError):
    pass


class UnlabeledTile(IhcMilError):
    pass


class NoTumorTiles(IhcMilError):
    pass


class EmptyPatient(IhcMilError):
    pass


# eval-kit
class SingleClassLabels(IhcMilError):
    pass


class NoPositives(IhcMilError):
    pass


class TooFewPatients(IhcMilError):
    pass


class NoTumorRegion(IhcMilError):
    pass


class NoCellsFound(IhcMilError):
    pass


class EmptySelection(IhcMilError):
    pass


class MismatchedGrid(IhcMilError):
    pass


# synth-cohort
class BadSynthConfig(IhcMilError):
    pass


# annotation-service
class NothingToUndo(IhcMilError):
    pass
