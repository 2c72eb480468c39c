"""Exception hierarchy shared by all edkd modules.

Every error raised by the package derives from :class:`EdkdError` so callers
(notably the CLI) can map failures to stable exit codes.
"""


class EdkdError(Exception):
    """Base class for all edkd errors."""


class ConfigurationError(EdkdError):
    """A model or experiment configuration violates its invariants."""


class ShapeError(EdkdError):
    """Tensor dimensions do not match what an operation requires."""


class ValidationError(EdkdError):
    """Input values are structurally fine but semantically invalid."""


class DataError(EdkdError):
    """A dataset cannot satisfy a sampling or preprocessing request."""


class FormatError(EdkdError):
    """A binary file is corrupt, truncated, or not in the expected format."""


class StalenessError(EdkdError):
    """A cached artifact no longer matches the inputs it was built from."""


class NumericError(EdkdError):
    """Training produced a non-finite value; the run is aborted."""
