"""Exception hierarchy shared by every hflab module."""


class HFLabError(Exception):
    """Base class for all hflab errors."""


# ingest
class MalformedRecord(HFLabError, ValueError):
    pass


class CrossedBook(HFLabError, ValueError):
    pass


class UnsortedLevels(HFLabError, ValueError):
    pass


class EmptySide(HFLabError, ValueError):
    pass


class OutOfOrder(HFLabError, ValueError):
    pass


class InvalidRegime(HFLabError, ValueError):
    pass


# features
class ZeroQuantities(HFLabError, ValueError):
    pass


class NonPositivePrice(HFLabError, ValueError):
    pass


class StreamTooShort(HFLabError, ValueError):
    pass


class SingularRegression(HFLabError, ValueError):
    pass


class DatasetFormatError(HFLabError, ValueError):
    pass


# nn core
class ShapeMismatch(HFLabError, ValueError):
    pass


class IndivisibleHeads(HFLabError, ValueError):
    pass


class OddDimension(HFLabError, ValueError):
    pass


class QuantileOutOfRange(HFLabError, ValueError):
    pass


class NonFiniteGradient(HFLabError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class CheckpointError(HFLabError, ValueError):
    pass


# models / training
class InvalidAblation(HFLabError, ValueError):
    pass


class InvalidSpec(HFLabError, ValueError):
    pass


class DivergedTraining(HFLabError, FloatingPointError):
    pass


class EmptySplit(HFLabError, ValueError):
    pass


class DegenerateTargets(HFLabError, ValueError):
    pass


class EmptyClass(HFLabError, ValueError):
    pass


# backtest
class ModelHorizonMismatch(HFLabError, ValueError):
    pass


class MalformedLadder(HFLabError, ValueError):
    pass


class SignalStreamMismatch(HFLabError, ValueError):
    pass


class DegenerateColumn(HFLabError, ValueError):
    pass


class TooFewTrades(HFLabError, ValueError):
    pass


class MissingModel(HFLabError, KeyError):
    pass


# cli
class ConfigError(HFLabError, ValueError):
    pass
