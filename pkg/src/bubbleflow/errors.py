"""Exception types shared by all bubbleflow modules."""


class BubbleflowError(Exception):
    """Base class for all package errors."""


class TriangleInequalityViolated(BubbleflowError):
    """Surface tensions admit no junction angles (degenerate tension triangle)."""


class Unsupported(BubbleflowError):
    """Requested configuration is outside the supported v1 feature set."""


class NotConverged(BubbleflowError):
    """An iterative solve (root find, Newton, rigid fit) failed to converge."""


class SupportCollision(BubbleflowError):
    """Bump support would overlap the taper support near the junctions."""


class EmbeddingGuard(BubbleflowError):
    """max|rho| exceeds the embedding safety radius; self-intersection risk."""


class GridMismatch(BubbleflowError):
    """State and reference were discretized on different parameter grids."""


class OpenLoop(BubbleflowError):
    """Composed curves do not close up to tolerance; enclosed area undefined."""


class LinearSolveFailed(BubbleflowError):
    """The implicit step's block system was singular or too ill-conditioned."""


class GuardTripped(BubbleflowError):
    """A flow step produced a state violating the embedding guard."""


class StepRejected(BubbleflowError):
    """A flow step increased energy beyond tolerance; caller should halve dt."""


class Diverged(BubbleflowError):
    """Trajectory left the stability regime (perturbation norm doubled)."""


class RankDeficientConstraints(BubbleflowError):
    """Constraint rows are linearly dependent; eigenproblem ill-posed."""


class IncompatibleData(BubbleflowError):
    """Dual data fails the solvability condition of the weak junction Laplacian."""


class SingularSystem(BubbleflowError):
    """Discrete junction Laplacian was singular on the constrained subspace."""


class InsufficientData(BubbleflowError):
    """Too few usable trajectory rows for a regression."""


class EnergyBelowFloor(BubbleflowError):
    """Energy gap already at machine precision; no decay decades left to fit."""
