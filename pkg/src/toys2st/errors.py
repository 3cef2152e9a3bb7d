"""Exception hierarchy shared by every module."""


class ToyS2STError(Exception):
    """Base class for all package errors."""


class ConfigError(ToyS2STError):
    pass


class OutOfRange(ToyS2STError):
    """A duration ratio fell outside the accepted speed-bucket range."""


class PromptShapeError(ToyS2STError):
    pass


class MalformedOutput(ToyS2STError):
    pass


class IncompleteOutput(ToyS2STError):
    """Emission ended without EOD. The partial parse is kept on ``.parse``."""

    def __init__(self, message, parse=None):
        super().__init__(message)
        self.parse = parse


class AlphabetError(ToyS2STError):
    pass


class DecodeError(ToyS2STError):
    pass


class MixedLanguageReject(ToyS2STError):
    pass


class EmptyReject(ToyS2STError):
    pass


class OracleError(ToyS2STError):
    pass


class AllSilence(ToyS2STError):
    pass


class ExampleTooLong(ToyS2STError):
    pass


class DegenerateBatch(ToyS2STError):
    pass


class ScheduleError(ToyS2STError):
    pass


class InputError(ToyS2STError):
    pass


class CheckpointError(ToyS2STError):
    pass
