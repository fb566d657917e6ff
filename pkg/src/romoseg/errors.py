"""Exception hierarchy shared across the package."""


class RomoError(Exception):
    """Base class for all package errors."""


class FormatError(RomoError, ValueError):
    """A file does not follow its documented container format."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IntegrityError(FormatError):
    """Header and payload disagree (e.g. truncated file)."""


class ConfigError(RomoError, ValueError):
    """A configuration value violates its invariants."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegeneracyError(RomoError):
    """Correspondences do not constrain a fundamental matrix."""


class InsufficientDataError(RomoError):
    """Too few correspondences for the requested estimate."""


class NoSupervisionError(RomoError):
    """No reliable frame carries any label."""


class PipelineError(RomoError):
    """The segmentation loop cannot proceed."""


class AlignmentError(RomoError):
    """Trajectories cannot be associated or aligned."""


class RefinementError(RomoError):
    """External mask refinement failed."""


class GenerationError(RomoError, ValueError):
    """A synthetic scene description is infeasible."""
