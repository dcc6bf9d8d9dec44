"""Exception types raised across the pipeline."""

from __future__ import annotations


class LendRLError(Exception):
    """Base class for all errors raised by lendrl."""


# ingest


class MissingColumn(LendRLError):
    def __init__(self, name: str):
        super().__init__(f"required column missing: {name!r}")
        self.name = name


class UnparsableField(LendRLError):
    def __init__(self, row: int, column: str, value: object = None):
        super().__init__(f"row {row}: cannot parse column {column!r} (value {value!r})")
        self.row = row
        self.column = column


class NonMonotonicTimestamp(LendRLError):
    def __init__(self, row: int, detail: str = "duplicate timestamp"):
        super().__init__(f"row {row}: {detail}")
        self.row = row


class DuplicateDate(LendRLError):
    def __init__(self, date: object):
        super().__init__(f"more than one snapshot for calendar day {date}")
        self.date = date


class WindowTooLong(LendRLError):
    pass


# curves / reward


class DomainError(LendRLError, ValueError):
    pass


class EmptyInput(LendRLError):
    pass


# mdp


class MissingFeature(LendRLError):
    def __init__(self, name: str):
        super().__init__(f"feature missing from row: {name!r}")
        self.name = name


class SeriesTooShort(LendRLError):
    pass


class EmptyDataset(LendRLError):
    pass


class DimensionMismatch(LendRLError, ValueError):
    pass


# neuralnet


class BadDims(LendRLError, ValueError):
    pass


class ShapeMismatch(LendRLError, ValueError):
    pass


# evaluate


class EmptySeries(LendRLError):
    pass


class ZeroBaseline(LendRLError, ZeroDivisionError):
    pass


class EmptyWindow(LendRLError):
    def __init__(self, label: str):
        super().__init__(f"stress window {label!r} has fewer than two points in the trajectory")
        self.label = label


class BadBins(LendRLError, ValueError):
    pass


# cli


class ConfigError(LendRLError):
    pass


class ParseError(ConfigError):
    def __init__(self, location: str, detail: str = ""):
        super().__init__(f"cannot parse config at {location}: {detail}".rstrip(": "))
        self.location = location


class InvalidValue(ConfigError):
    def __init__(self, field: str, detail: str = ""):
        super().__init__(f"invalid value for {field!r}" + (f": {detail}" if detail else ""))
        self.field = field


class MissingArtifact(LendRLError):
    def __init__(self, stage: str, path: object = None):
        msg = f"missing artifact from stage {stage!r}"
        if path is not None:
            msg += f" ({path})"
        super().__init__(msg)
        self.stage = stage
