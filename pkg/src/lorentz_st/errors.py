"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input violates a documented precondition (shape, range, size)."""


class UndefinedApertureError(ContractViolation):
    """The entailment cone of a point at the hyperboloid origin is undefined."""


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed.

    The message always names the offending file and the position
    (line or byte offset) together with what was expected there.
    """

    def __init__(self, path, where: str, expected: str, found: str):
        self.path = str(path)
        self.where = where
        self.expected = expected
        self.found = found
        super().__init__(f"{self.path}: {where}: expected {expected}, found {found}")
