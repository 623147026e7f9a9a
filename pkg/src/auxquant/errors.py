"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """An op received inputs with incompatible shapes."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericFaultError(ArithmeticError):
    """An op produced non-finite values, or a backward rule broke its
    shape contract."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class SpecValidationError(ValueError):
    """A declarative spec failed validation.

    Carries every violation found, not just the first.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        detail = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"invalid spec:\n{detail}")


class DataFormatError(ValueError):
    """A dataset file does not match its declared binary format."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss.

    ``last_good`` holds the most recent end-of-epoch checkpoint taken
    before the divergence, or None when the first epoch diverged.
    """

    def __init__(self, message: str, last_good=None, diagnostic: dict | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostic = diagnostic or {}
