# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

__version__ = "0.3.0"

from .core.tensor import Tape, Tensor  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    ContractError,
    CorruptionError,
    DimensionError,
    FormatError,
    NumericError,
    SsmPeftError,
    TrainingAborted,
    UnknownArchError,
)
