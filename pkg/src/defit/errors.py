"""Exception types shared across the package.

Every failure mode surfaced by the public API maps to one of these, so callers
(and the CLI) can distinguish bad configuration from bad data from broken
artifacts without string-matching messages.
"""


class DefitError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(DefitError, ValueError):
    """A configuration or function parameter is out of its legal range."""


class DimensionError(DefitError, ValueError):
    """A tensor has an incompatible shape; the message names the offending axis."""


class LabelError(DefitError, ValueError):
    """A label index is outside [0, C); the message includes the offending index."""


class NumericError(DefitError, ArithmeticError):
    """A numeric invariant was violated (non-finite values, degenerate norms)."""


class DegenerateEmbeddingError(NumericError):
    """An embedding collapsed to (near-)zero norm and cannot be normalized."""


class InfiniteDivergenceError(NumericError):
    """KL divergence is undefined: the reference has a zero where p has mass."""


class UnknownClassError(DefitError, KeyError):
    """A class name is not in the known class set; the message lists known names."""

    def __str__(self) -> str:  # KeyError quotes its arg; keep the plain message
        return self.args[0] if self.args else ""


class ContextLengthError(DefitError, ValueError):
    """A token sequence (plus prompt slots) exceeds the encoder's capacity."""


class PromptInitError(DefitError, ValueError):
    """Prompt initialization failed (e.g. template shorter than prompt width)."""


class ManifestParseError(DefitError, ValueError):
    """A dataset manifest failed to parse; the message includes the line number."""


class ManifestValidationError(DefitError, ValueError):
    """A manifest parsed but violates its invariants (duplicate ids, bad split...)."""


class IngestionError(DefitError, ValueError):
    """Referenced image files are missing; the message lists the missing paths."""


class SamplingError(DefitError, ValueError):
    """Few-shot sampling cannot proceed (e.g. a class has no train records)."""


class CaptionProtocolError(DefitError, RuntimeError):
    """The captioner endpoint returned a malformed or non-2xx response."""


class CaptionerUnavailableError(DefitError, RuntimeError):
    """The captioner endpoint could not be reached after the configured retries."""


class ConfigError(DefitError, ValueError):
    """A run configuration is invalid; the message names the field."""


class TrainingDivergedError(DefitError, RuntimeError):
    """Training aborted on a non-finite loss; carries the loss breakdown."""

    def __init__(self, message: str, breakdown: dict | None = None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})


class CheckpointIntegrityError(DefitError, RuntimeError):
    """A checkpoint file is truncated or corrupted; no partial state was loaded."""


class CheckpointVersionError(DefitError, RuntimeError):
    """Checkpoint schema version mismatch; the message states both versions."""


class CheckpointMismatchError(DefitError, ValueError):
    """Checkpoint parameters do not fit the model built from its metadata."""


class EvaluationError(DefitError, ValueError):
    """A metric is undefined on the given inputs (empty split, one-sided class)."""


class CompatibilityError(DefitError, ValueError):
    """Model and dataset disagree (class sets, embedding dimensions)."""


class AlignmentError(DefitError, ValueError):
    """Cross-dataset class alignment is incomplete; the message lists the gaps."""
