"""Exception types shared across the package."""


class FitsError(Exception):
    """Base class for all package errors."""


# kg_store
class IdNotFound(FitsError, KeyError):
    pass


class DuplicateTriplet(FitsError, ValueError):
    pass


class NotEnoughIrrelevant(FitsError, ValueError):
    pass


# corpus
class GenerationFailed(FitsError, RuntimeError):
    pass


class NothingToMask(FitsError, ValueError):
    pass


class NoAlignablePair(FitsError, ValueError):
    pass


# numerics
class ShapeError(FitsError, ValueError):
    pass


class DegenerateInput(FitsError, ValueError):
    pass


class RankError(FitsError, ValueError):
    pass


# encoder / objectives
class SequenceTooLong(FitsError, ValueError):
    pass


class SpanError(FitsError, ValueError):
    pass


class NothingToScore(FitsError, ValueError):
    pass


class LabelMissing(FitsError, ValueError):
    pass


# trainer / cli
class ConfigError(FitsError, ValueError):
    pass


class CheckpointError(FitsError, IOError):
    pass


class StageError(FitsError, ValueError):
    pass


# diagnostics
class EmptyReport(FitsError, ValueError):
    pass
