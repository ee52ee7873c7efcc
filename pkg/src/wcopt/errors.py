"""Error types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration value or argument violates its contract."""


class ValidationError(ConfigError):
    """An experiment config failed validation.

    Carries the full list of violations so a user can fix every field in one
    pass instead of replaying the parser.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid experiment config:\n" + "\n".join(f"  - {v}" for v in violations))


class ProxConvergenceError(RuntimeError):
    """The inner prox solver exhausted its iteration budget.

    ``result`` holds the best iterate found and its optimality residual so
    callers can inspect how far the solve got.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
