"""Exception types raised by lbtrace."""


class LBTraceError(Exception):
    """Base class for all lbtrace errors."""


class DegenerateGradient(LBTraceError):
    """The level-set gradient vanishes where a normal is required."""


class EmptyCut(LBTraceError):
    """No element of the background mesh is cut by the surface."""


class FrameFailure(LBTraceError):
    """No local frame keeps the projection direction transversal to the surface."""

    def __init__(self, message, element=None):
        super().__init__(message if element is None else f"element {element}: {message}")
        self.element = element


class RootFindFailure(LBTraceError):
    """A bracketed root search along a ray did not converge."""

    def __init__(self, message, element=None):
        super().__init__(message if element is None else f"element {element}: {message}")
        self.element = element


class UnsupportedDegree(LBTraceError):
    """Requested polynomial degree is not available."""


class OutsideElement(LBTraceError):
    """Evaluation point lies outside the element."""


class NoConvergence(LBTraceError):
    """An iterative linear solver hit its iteration cap."""


class InconsistentRHS(LBTraceError):
    """A singular system was given a right-hand side outside its range."""


class NotDefinite(LBTraceError):
    """The mass matrix is not numerically positive definite."""


class ClassificationAmbiguous(LBTraceError):
    """Eigenvector indicators fall between the accept and reject thresholds."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class RankEstimateUnstable(LBTraceError):
    """The numerical rank of A - beta*B changed between random shifts."""


class MultiplicityMismatch(LBTraceError):
    """A computed eigenvalue cluster does not have the expected size."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues
