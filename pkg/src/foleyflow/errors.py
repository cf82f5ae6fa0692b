"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so keep the classes coarse.
"""


class FoleyFlowError(Exception):
    pass


class ShapeError(FoleyFlowError, ValueError):
    pass


class ContractError(FoleyFlowError, ValueError):
    """A precondition of an operation was violated."""


class EmptyInputError(ContractError):
    pass


class DomainError(FoleyFlowError, ValueError):
    """A scalar argument lies outside the accepted range."""


class ConfigError(FoleyFlowError, ValueError):
    pass


class FormatError(FoleyFlowError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(FoleyFlowError, ArithmeticError):
    pass
