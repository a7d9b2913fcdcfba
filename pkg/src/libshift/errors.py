"""Exception hierarchy for the migration pipeline.

Every operational failure maps to one exception class so callers can
distinguish validation problems (bad input), stage failures (a pipeline
step broke), and per-file soft failures (recorded as warnings upstream).
"""

from __future__ import annotations


class LibshiftError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LibshiftError):
    """A user-supplied input violates a documented precondition."""


# --- environment preparation ---------------------------------------------

class NoVersionAvailable(LibshiftError):
    """No release of the requested artifact existed at the reference date."""


class PackageNotFound(LibshiftError):
    """The package registry has no record of the requested package."""


class InterpreterMissing(LibshiftError):
    """The requested Python interpreter version is not installed on the host."""


class InstallFailed(LibshiftError):
    """A package failed to install into the virtual environment."""

    def __init__(self, package: str, output: str = ""):
        super().__init__(f"failed to install {package!r}")
        self.package = package
        self.output = output


class RunnerCrashed(LibshiftError):
    """The test runner exited without producing a report."""


class NoTestsCollected(LibshiftError):
    """The test runner found no tests in the project."""


# --- discovery -------------------------------------------------------------

class MalformedArchive(LibshiftError):
    """The package archive is not a readable wheel."""


class NoImportNames(LibshiftError):
    """No importable top-level module names could be derived for a library."""


class SyntaxUnparsable(LibshiftError):
    """A source file could not be parsed; the file is reported and skipped."""

    def __init__(self, path: str, cause: str = ""):
        super().__init__(f"cannot parse {path}: {cause}")
        self.path = path


class MalformedProfile(LibshiftError):
    """The profile text violates the supported CallGrind grammar subset."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# --- model endpoint --------------------------------------------------------

class EndpointUnreachable(LibshiftError):
    """The chat-completion endpoint could not be reached or kept failing."""


class RateLimited(LibshiftError):
    """The endpoint kept answering 429 after all retries."""


class ContextOverflow(LibshiftError):
    """The endpoint reported that the prompt exceeds its token limit."""


class EmptyResponse(LibshiftError):
    """The endpoint answered without any assistant text."""


class NoCodeBlock(LibshiftError):
    """The assistant response contains no usable fenced code block."""


class WriteFailed(LibshiftError):
    """A migrated file could not be written to disk."""

    def __init__(self, path: str, cause: str = ""):
        super().__init__(f"cannot write {path}: {cause}")
        self.path = path


# --- post-processing -------------------------------------------------------

class InsertOutOfRange(LibshiftError):
    """A skipped hunk names an insertion point that cannot exist.

    Signals an internal inconsistency between diffing and classification,
    not a user error.
    """


# --- grading ---------------------------------------------------------------

class NoBaselinePassingTests(LibshiftError):
    """The baseline report has no passing tests, so correctness is undefined."""


class ZeroTotal(LibshiftError):
    """Both effort counters are zero, so the effort split is undefined."""


# --- orchestration ---------------------------------------------------------

class StageError(LibshiftError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
