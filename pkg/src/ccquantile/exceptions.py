"""Exception types raised by the solver toolkit."""


class InvalidArgumentError(ValueError):
    """An argument is outside the domain of the operation."""


class EvaluationError(RuntimeError):
    """A problem evaluator returned a non-finite value."""

    def __init__(self, message, scenario=None):
        super().__init__(message)
        self.scenario = scenario


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of iterations."""


class QpFailure(RuntimeError):
    """The trust-region subproblem could not be solved."""


class ConfigError(ValueError):
    """A configuration file or command line is malformed."""


class ScenarioFormatError(ValueError):
    """A scenario CSV file is malformed."""
