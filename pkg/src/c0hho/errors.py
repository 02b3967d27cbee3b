class InputError(ValueError):
    """Invalid user-facing input (bad argument, malformed file, out-of-range degree)."""


class FactorizationError(RuntimeError):
    """Sparse factorization lost positive definiteness.

    Carries the elimination index of the first non-positive pivot in
    ``pivot_index`` so the caller can tell a BC/penalty bug from a
    conditioning failure.
    """

    def __init__(self, message, pivot_index=None):
        super().__init__(message)
        self.pivot_index = pivot_index
