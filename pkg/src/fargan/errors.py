#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

"""
Exceptions raised across fargan. Each one also derives from the builtin
exception that best describes it so callers can catch broadly.
"""


class FarganError(Exception):
    """
    Base fargan exception.
    """


class DimensionError(FarganError, ValueError):
    pass


class ContractViolation(FarganError, ValueError):
    pass


class ConfigurationError(FarganError, ValueError):
    pass


class DatasetError(FarganError, ValueError):
    pass


class LandmarkParseError(FarganError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CheckpointFormatError(FarganError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalInstabilityError(FarganError, ArithmeticError):
    pass


class TrainingAborted(FarganError, RuntimeError):
    def __init__(self, message, parameter=None, step=None, last_checkpoint=None):
        details = []
        if parameter:
            details.append(f"parameter={parameter}")
        if step is not None:
            details.append(f"step={step}")
        if last_checkpoint:
            details.append(f"last good checkpoint: {last_checkpoint}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.parameter = parameter
        self.step = step
        self.last_checkpoint = last_checkpoint
