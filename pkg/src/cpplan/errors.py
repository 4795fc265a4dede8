"""Exception types shared across the planner.

The CLI maps these onto exit codes, so keep the hierarchy flat.
"""


class PlannerError(Exception):
    """Base class for all planner errors."""


class MaskError(PlannerError, ValueError):
    """A mask or slice is malformed (bad bounds, bad pattern parameters)."""


class ConstraintViolation(PlannerError, ValueError):
    """A divisibility or cardinality constraint does not hold.

    ``constraint`` carries the violated rule as a human-readable formula so the
    CLI can echo it back verbatim.
    """

    def __init__(self, constraint: str, detail: str = "") -> None:
        self.constraint = constraint
        msg = f"constraint violated: {constraint}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class ConfigError(PlannerError, ValueError):
    """A config or scenario file could not be parsed or is inconsistent."""


class InvariantError(PlannerError, AssertionError):
    """An internal consistency check failed; indicates a bug, not bad input."""
