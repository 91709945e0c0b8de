"""Exception types shared across the package."""


class GddpError(Exception):
    """Base class for all library errors."""


class ValidationError(GddpError):
    """Problem data violates the supported problem class."""


class NumericalError(GddpError):
    """A numerical routine failed to meet its accuracy contract."""


class NoConvergence(NumericalError):
    """An iterative solver hit its iteration cap before converging."""


class StrongDualityViolation(GddpError):
    """Primal/dual one-stage objectives disagree beyond tolerance.

    The bound built from the dual objective is still valid and is attached
    as ``bound``; callers may accept it, but the exact-improvement property
    of the iteration is no longer guaranteed.
    """

    def __init__(self, message, bound=None, gap=None):
        super().__init__(message)
        self.bound = bound
        self.gap = gap


class ExhaustedSamples(GddpError):
    """No feasible, unconverged sample point remains to pick."""


class InfeasibleState(GddpError):
    """The admissible input set at the given state is empty."""


class Unreachable(GddpError):
    """No admissible input maps the given state to the requested successor."""


class BoxViolated(GddpError):
    """A computed input sequence exists but violates the input constraints.

    The offending sequence is attached as ``inputs``.
    """

    def __init__(self, message, inputs=None):
        super().__init__(message)
        self.inputs = inputs


class AnchorUnreachable(GddpError):
    """A certification rollout could not be steered to the anchor state."""


class GenerationFailed(GddpError):
    """Random instance generation exhausted its retry budget."""
