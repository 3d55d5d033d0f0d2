# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#


class SsmPeftError(Exception):
    pass


class DimensionError(SsmPeftError, ValueError):
    pass


class ContractError(SsmPeftError, ValueError):
    pass


class NumericError(SsmPeftError, ArithmeticError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class TrainingAborted(NumericError):
    """Raised when the loss stops being finite during training.

    ``snapshot`` holds copies of the last trainable arrays for which the
    loss was still finite.
    """

    def __init__(self, message, snapshot=None, epoch=None):
        super().__init__(message)
        self.snapshot = {} if snapshot is None else snapshot
        self.epoch = epoch


class UnknownArchError(SsmPeftError, LookupError):
    pass


class FormatError(SsmPeftError):
    pass


class CorruptionError(FormatError):
    pass


class ConfigError(SsmPeftError, ValueError):
    def __init__(self, message, path=""):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
