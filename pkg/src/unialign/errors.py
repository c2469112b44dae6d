"""Exception types raised across the package.

Every failure mode a caller can reasonably branch on gets its own class;
generic misuse falls back to the builtin exceptions.
"""


class ShapeError(ValueError):
    """Tensor shapes disagree with an operation's contract."""


class SequenceError(ValueError):
    """An operation received an empty token sequence."""


class DegenerateEmbeddingError(ValueError):
    """A vector with (near-)zero norm cannot be normalized."""


class EvaluationError(RuntimeError):
    """An objective evaluated to a non-finite value."""


class ConfigurationError(ValueError):
    """Invalid model, run, or file configuration."""


class ModalityError(LookupError):
    """Modality is unknown or not registered for the requested use."""


class DuplicateModalityError(ValueError):
    """Modality is already registered."""


class BatchError(ValueError):
    """Batched inputs disagree in size or pairing."""


class LabelError(ValueError):
    """A class label is outside the declared vocabulary."""


class VocabularyError(LookupError):
    """A string is missing from a taxonomy or answer vocabulary."""


class FormatError(ValueError):
    """A file does not match its declared binary or text format."""


class VersionError(FormatError):
    """A file carries an unsupported format version."""


class CorruptionError(FormatError):
    """A file is truncated or fails its checksum.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Carries the optimizer ``step`` and the temperature ``tau`` at failure.
    """

    def __init__(self, message: str, step: int, tau: float):
        super().__init__(f"{message} (step {step}, tau {tau:.6g})")
        self.step = step
        self.tau = tau


class FreezeViolationError(RuntimeError):
    """A frozen parameter changed during an optimizer step."""
