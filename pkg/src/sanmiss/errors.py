"""Exception hierarchy shared by the library and the command-line tool."""


class SanmissError(Exception):
    """Base class. ``exit_code`` is what the CLI returns for this error."""

    exit_code = 1
    code = "error"

    def __init__(self, message, **detail):
        super().__init__(message)
        self.detail = detail


class ConfigError(SanmissError, ValueError):
    exit_code = 2
    code = "config_error"


class ValidationError(SanmissError, ValueError):
    """Malformed tables, spaces, datasets or constraint payloads."""

    exit_code = 2
    code = "invalid_input"


class DominanceError(ValidationError):
    """A ratio dP/dQ is needed on a cell where Q has no mass."""

    code = "dominance_violated"


class InfeasibleConstraintError(SanmissError, ValueError):
    exit_code = 3
    code = "infeasible_constraints"


class IdentificationError(SanmissError, ValueError):
    """Inputs cannot identify the full-data law (e.g. a variable never observed)."""

    exit_code = 3
    code = "not_identified"


class ConvergenceError(SanmissError, RuntimeError):
    exit_code = 4
    code = "no_convergence"
