class FabError(Exception):
    """Base class for errors raised by fabtest."""


class ValidationError(FabError, ValueError):
    """Input data or configuration violates a precondition."""


class InsufficientDataError(ValidationError):
    pass


class NumericalError(FabError, ArithmeticError):
    """A factorization or solve failed during fitting or sampling."""

    def __init__(self, message, iteration=None, block=None):
        if iteration is not None or block is not None:
            message = f"{message} (iteration={iteration}, block={block})"
        super().__init__(message)
        self.iteration = iteration
        self.block = block
