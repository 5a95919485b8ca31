"""Exception hierarchy shared by every stage of the pipeline."""


class VCError(Exception):
    """Base class for all errors raised by embvc."""


class UnsupportedFormat(VCError):
    pass


class AllSilent(VCError):
    pass


class EmptyCollection(VCError):
    pass


class DimensionMismatch(VCError, ValueError):
    pass


class ShapeMismatch(VCError, ValueError):
    pass


class EmptyDataset(VCError):
    pass


class DuplicateSpeakerId(VCError):
    pass


class UnknownSpeaker(VCError, KeyError):
    pass


class InsufficientSpeakers(VCError):
    pass


class WindowTooShort(VCError):
    pass


class InconsistentArch(VCError, ValueError):
    pass


class UnknownWidth(VCError, ValueError):
    pass


class NonFiniteLoss(VCError, FloatingPointError):
    """Raised when a training step produces a NaN/Inf loss.

    The step is rolled back before raising; ``diagnostics`` carries the
    partial loss values that triggered the abort.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoValidWindows(VCError):
    pass


class CheckpointMismatch(VCError):
    pass


class InsufficientData(VCError):
    pass


class UnknownTarget(VCError, KeyError):
    pass


class EmptyGroup(VCError):
    pass


class MissingArtifact(VCError, FileNotFoundError):
    """A run-directory file that an earlier subcommand should have produced is absent."""


class RunLocked(VCError):
    pass
