class PiecewiseSirError(Exception):
    """Base class of every error raised by piecewise_sir."""


class ConfigError(PiecewiseSirError):
    pass


class InvalidSeries(PiecewiseSirError):
    pass


class NonFiniteInput(InvalidSeries):
    pass


class UnderReportingSingular(PiecewiseSirError):
    pass


class LengthMismatch(PiecewiseSirError):
    pass


class InsufficientData(PiecewiseSirError):
    pass


class NoNeighbors(PiecewiseSirError):
    pass


class AlignmentError(PiecewiseSirError):
    pass


class SingularLagMatrix(PiecewiseSirError):
    pass


class SegmentTooShort(PiecewiseSirError):
    pass


class HorizonTooLong(PiecewiseSirError):
    pass


class ParseError(PiecewiseSirError):
    """Malformed input file. `line` is the 1-based line number in the file
    (the header is line 1), or None when the error is not tied to a line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = 'line {}: {}'.format(line, message)
        super().__init__(message)
        self.line = line


class NonMonotonicDates(ParseError):
    pass


class DuplicateRow(ParseError):
    pass


class MissingPopulation(PiecewiseSirError):

    def __init__(self, region_id):
        super().__init__('no population row for region {!r}'.format(region_id))
        self.region_id = region_id
