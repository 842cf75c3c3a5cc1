"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto process exit codes, so each class carries one.
"""


class MTAError(Exception):
    exit_code = 1


class ParameterError(MTAError, ValueError):
    exit_code = 2


class ShapeError(ParameterError):
    pass


class TargetIndexError(ParameterError, IndexError):
    pass


class DegenerateVectorError(ParameterError):
    pass


class StateError(MTAError, RuntimeError):
    exit_code = 2


class DataError(MTAError):
    exit_code = 3


class ContaminationError(DataError):
    pass


class BankFormatError(DataError):
    pass


class VersionMismatchError(BankFormatError):
    pass


class ChecksumError(BankFormatError):
    pass


class MissingFileError(BankFormatError, FileNotFoundError):
    pass


class DivergenceError(MTAError, ArithmeticError):
    exit_code = 4

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
