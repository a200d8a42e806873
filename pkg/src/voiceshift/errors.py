"""Exception hierarchy shared across the package."""


class VoiceShiftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(VoiceShiftError):
    """An argument violates a documented precondition (shape, range, vocabulary)."""


class ConfigMismatchError(VoiceShiftError):
    """Two components were combined with incompatible configurations."""


class ExtractionError(VoiceShiftError):
    """A feature extractor failed; carries the affected frame range when known."""

    def __init__(self, message, frame_range=None):
        super().__init__(message)
        self.frame_range = frame_range


class AlignmentError(VoiceShiftError):
    """The text aligner failed to produce an alignment."""


class NoFeasiblePathError(AlignmentError):
    """No monotonic path exists (more phonemes than frames)."""


class CheckpointError(VoiceShiftError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class DivergenceError(VoiceShiftError):
    """Training produced a non-finite loss; state was dumped for inspection."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class InvalidStateError(VoiceShiftError):
    """An operation was called on a component that is not ready (e.g. untrained)."""


class UsageError(VoiceShiftError):
    """Bad command-line invocation."""
