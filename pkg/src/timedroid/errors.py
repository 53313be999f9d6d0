"""Exception hierarchy shared across the pipeline stages.

Each class carries an ``exit_code`` so the CLI can map failures to distinct
process statuses without a lookup table.
"""


class TimedroidError(Exception):
    exit_code = 1


# -- parsing ---------------------------------------------------------------

class ParseError(TimedroidError):
    exit_code = 10


class NotAZip(ParseError):
    def __init__(self, path):
        super().__init__(f"not a ZIP archive: {path}")
        self.path = path


class MissingDex(ParseError):
    def __init__(self, path):
        super().__init__(f"no classes*.dex entry in {path}")
        self.path = path


class MissingManifest(ParseError):
    def __init__(self, path):
        super().__init__(f"no AndroidManifest.xml entry in {path}")
        self.path = path


class BadMagic(ParseError):
    pass


class TruncatedDex(ParseError):
    pass


class UnknownOpcode(ParseError):
    """Opcode byte with no defined instruction. Recoverable: the extractor
    records it and emits the UNKNOWN symbol instead of raising."""

    def __init__(self, byte, offset):
        super().__init__(f"unknown opcode 0x{byte:02x} at code unit {offset}")
        self.byte = byte
        self.offset = offset


class BadAxml(ParseError):
    pass


# -- features / artifacts --------------------------------------------------

class EmptyCorpus(TimedroidError):
    exit_code = 11


class FingerprintMismatch(TimedroidError):
    exit_code = 5


class MissingArtifact(TimedroidError):
    exit_code = 4


class ConfigInvalid(TimedroidError):
    exit_code = 3


# -- dataset ---------------------------------------------------------------

class Unsatisfiable(TimedroidError):
    exit_code = 12


class TooFewSamples(TimedroidError):
    exit_code = 12


# -- numerics --------------------------------------------------------------

class ShapeMismatch(TimedroidError, ValueError):
    exit_code = 13


class DegenerateBatch(TimedroidError, ValueError):
    exit_code = 13


class SingleClass(TimedroidError, ValueError):
    exit_code = 13


class NonFiniteInput(TimedroidError, ValueError):
    exit_code = 13


class EmptyTestSet(TimedroidError):
    exit_code = 13


class TemporalLeak(TimedroidError):
    """Evaluation was asked to score a sample the model was trained on."""
    exit_code = 14


# -- report ----------------------------------------------------------------

class ReportError(TimedroidError):
    exit_code = 15


class CacheMiss(ReportError):
    pass


class AuthError(ReportError):
    pass


class RateLimited(ReportError):
    def __init__(self, message, retry_after=None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedReport(ReportError):
    pass


class EmptyCohort(ReportError):
    pass
