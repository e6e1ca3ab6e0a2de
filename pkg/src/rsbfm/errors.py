"""Exception types shared across the package."""


class StructuralError(ValueError):
    """Inputs have inconsistent shapes or violate a type invariant."""


class ParameterError(ValueError):
    """A configuration or call parameter is out of its admissible range."""


class NumericalError(ArithmeticError):
    """A factorization or evaluation failed numerically.

    ``index`` identifies the failing pivot, row or observation when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ChainError(RuntimeError):
    """Failure in the middle of an MCMC run.

    Carries the sweep at which the failure occurred and, when a checkpoint
    directory was configured, the path of the last good checkpoint.
    """

    def __init__(self, message, iteration, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
