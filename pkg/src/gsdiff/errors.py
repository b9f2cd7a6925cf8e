"""Exception hierarchy. The CLI maps ContractError to exit 1 and OSError to exit 2."""


class ContractError(ValueError):
    """A precondition or shape contract was violated."""


class InvalidCameraError(ContractError):
    pass


class DegeneratePoseError(ContractError):
    pass


class DegenerateRotationError(ContractError):
    pass


class InvalidInputError(ContractError):
    pass


class EmptyInputError(ContractError):
    pass


class ConstraintsUnsatisfiableError(ContractError):
    pass


class NonFiniteLossError(RuntimeError):
    pass
