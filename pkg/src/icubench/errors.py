"""Exception hierarchy. Every stage raises a subclass of BenchmarkError so the
CLI can tag failures with the stage that produced them."""


class BenchmarkError(Exception):
    """Base class for all errors raised by this package."""

    stage = "benchmark"


class ParseError(BenchmarkError):
    """Malformed input file (CSV syntax, bad cell). Carries a row number when known."""

    stage = "ingest"

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class SchemaError(BenchmarkError):
    """Column mapping does not fit the file, or per-patient invariants are violated."""

    stage = "ingest"


class PipelineError(BenchmarkError):
    """A preprocessing step cannot produce a usable cohort."""

    stage = "preprocess"


class DataError(BenchmarkError):
    """Inconsistent patient data (e.g. a recorded day beyond the stay length)."""

    stage = "preprocess"


class SplitError(BenchmarkError):
    """Invalid split request (k too large, cohort too small, bad fold index)."""

    stage = "split"


class MetricError(BenchmarkError):
    """Metric undefined for the given inputs (single-class labels, no positives)."""

    stage = "metrics"


class TrainingError(BenchmarkError):
    """Training diverged or was asked to do something impossible."""

    stage = "train"


class AlignmentError(BenchmarkError):
    """External prediction traces do not line up with the cohort."""

    stage = "score"


class ReportError(BenchmarkError):
    """Report requested from an empty or inconsistent manifest."""

    stage = "report"
