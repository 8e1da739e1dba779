"""Exception hierarchy.

Each class carries the process exit code the command line maps it to.
"""


class TrajOverlapError(Exception):
    exit_code = 2


class InputError(TrajOverlapError, ValueError):
    """Malformed or out-of-range input."""

    exit_code = 1


class PipelineError(TrajOverlapError):
    """A pipeline stage produced nothing usable (e.g. every user filtered out)."""

    exit_code = 2


class ValidationError(TrajOverlapError, ValueError):
    """A file or object violates its format contract."""

    exit_code = 3
