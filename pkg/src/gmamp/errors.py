"""Exception types shared across the package."""


class DivergenceError(RuntimeError):
    """The iterative recursion produced a non-finite or blown-up state.

    Carries the iteration (layer) index at which divergence was detected and,
    when available, the partial trajectory computed so far.
    """

    def __init__(self, message, iteration=None, trajectory=None):
        super().__init__(message)
        self.iteration = iteration
        self.trajectory = trajectory
