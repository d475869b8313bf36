"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: configuration problems exit 2,
runtime/numerical problems exit 3, I/O and file-format problems exit 4.
"""


class SpeechLabError(Exception):
    """Base class for all package errors."""


class ShapeError(SpeechLabError):
    """Tensor or sequence dimensions do not line up."""


class TapeError(SpeechLabError):
    """Backward pass requested on a missing or already-consumed tape."""


class GradMissingError(SpeechLabError):
    """Optimizer stepped a parameter whose gradient was never populated."""


class NonFiniteError(SpeechLabError):
    """An operation produced or received non-finite values."""


class DivergenceError(SpeechLabError):
    """Iterative procedure (ODE solve, generation loop) left the finite range."""


class ConfigError(SpeechLabError):
    """Invalid configuration value, schema violation, or unusable argument."""


class FormatError(SpeechLabError):
    """Malformed or unsupported file contents (e.g. WAV chunks)."""


class InputTooShortError(SpeechLabError):
    """Audio shorter than the encoder's receptive field."""


class UndefinedRetentionError(SpeechLabError):
    """Band retention requested where the input band energy is zero."""


class IngestionError(SpeechLabError):
    """Corpus loading failed; message lists the offending items."""


class PipelineError(SpeechLabError):
    """Training run violated one of its contracts (non-finite loss, broken freeze)."""
