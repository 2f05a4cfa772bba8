class BudgetExceeded(RuntimeError):
    """Raised when a computation would exceed its configured work cap."""

    def __init__(self, work: float, limit: float, what: str = "work"):
        super().__init__(f"{what} {work:.4g} exceeds limit {limit:.4g}")
        self.work = work
        self.limit = limit
        self.what = what


class ConditioningInfeasible(RuntimeError):
    """Rejection sampling accepted too few paths to estimate anything."""

    def __init__(self, message: str, *, acceptance_rate: float, floor: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate
        self.floor = floor


class ManifestError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations
