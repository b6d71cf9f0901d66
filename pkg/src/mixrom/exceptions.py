"""Exception hierarchy shared by every module.

Each class carries a stable, distinct ``exit_code`` used by the command-line
front end (``2`` is reserved for usage errors).
"""


class MixromError(Exception):
    exit_code = 1


class ConfigError(MixromError):
    exit_code = 3


class ManifestError(MixromError):
    exit_code = 4


class FormatError(MixromError):
    exit_code = 5


class ShapeMismatch(MixromError, ValueError):
    exit_code = 6


class MixedDofCount(ShapeMismatch):
    exit_code = 12


class EmptyInput(MixromError, ValueError):
    exit_code = 13


class SingularSystem(MixromError):
    exit_code = 7

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DivergenceDetected(MixromError):
    exit_code = 8

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class KTooLarge(MixromError, ValueError):
    exit_code = 9


class OutOfRange(MixromError, ValueError):
    exit_code = 10

    def __init__(self, name, value=None, bounds=None):
        msg = f"parameter {name!r} out of range"
        if value is not None and bounds is not None:
            msg += f": {value} not in [{bounds[0]}, {bounds[1]}]"
        super().__init__(msg)
        self.name = name


class OutOfDomain(MixromError, ValueError):
    exit_code = 14

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class NonPositiveSigma(MixromError, ValueError):
    exit_code = 15


class EmptyGrid(MixromError, ValueError):
    exit_code = 16


class ZeroReference(MixromError, ValueError):
    exit_code = 17


class IoError(MixromError, OSError):
    exit_code = 11
