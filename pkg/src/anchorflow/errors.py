"""Exception types shared across the package.

CLI exit codes: 0 success, 2 config error, 3 missing artifact,
4 numerical divergence, 1 anything else.
"""


class AnchorflowError(Exception):
    """Base class for all package-specific errors."""


class PromptSyntaxError(AnchorflowError):
    """Malformed prompt text. Carries the byte offset and the expected-token set."""

    def __init__(self, message, offset, expected=()):
        super().__init__(f"{message} (byte offset {offset}, expected one of {sorted(expected)})")
        self.offset = offset
        self.expected = frozenset(expected)


class PromptSemanticError(AnchorflowError):
    """Well-formed prompt that violates a semantic constraint."""


class LengthError(AnchorflowError):
    """Token sequence exceeds the fixed length cap."""


class GeometryError(AnchorflowError):
    """A motion script would push an object out of the valid frame region."""


class ShapeError(AnchorflowError):
    """Tensor dimension mismatch."""


class DimensionError(AnchorflowError):
    """Feature matrices disagree in width or are too small."""


class CountError(AnchorflowError):
    """Too few items for the requested statistic."""


class IoError(AnchorflowError):
    """File read/write failure."""


class FormatError(AnchorflowError):
    """Container magic/version/shape mismatch."""


class ChecksumError(AnchorflowError):
    """Container payload failed its CRC check."""


class HashMismatchError(AnchorflowError):
    """Adapter checkpoint does not reference this base checkpoint."""


class DivergenceError(AnchorflowError):
    """Training loss became non-finite."""


class MissingCheckpointError(AnchorflowError):
    """A study was asked to run without its required checkpoints."""


class ConfigError(AnchorflowError):
    """Invalid or unknown configuration fields."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MissingCheckpointError, FileNotFoundError)):
        return EXIT_MISSING
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    return 1
