"""Exception hierarchy and the process exit codes the CLI maps them to."""

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class UgtError(Exception):
    """Base class for every error raised by this package."""

    exit_code = EXIT_VALIDATION


class ValidationError(UgtError):
    """A precondition or type invariant was violated."""

    exit_code = EXIT_VALIDATION


class DegenerateClusterError(ValidationError):
    """Clustering cannot produce the requested number of distinct groups."""


class NumericalError(UgtError):
    """A non-finite value appeared where finite math was required."""

    exit_code = EXIT_NUMERICAL


class TensorFormatError(UgtError):
    """Structurally malformed tensor file (magic, version, dims, truncation)."""

    exit_code = EXIT_IO


class ManifestError(ValidationError):
    """Malformed dataset manifest; ``category`` names the specific defect."""

    def __init__(self, message: str, category: str):
        super().__init__(message)
        self.category = category
