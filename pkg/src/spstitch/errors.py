"""Exception and warning types raised across the stitching engine."""


class StitchError(Exception):
    """Base class for every error raised by spstitch."""


class PointAtInfinity(StitchError):
    pass


class SingularHomography(StitchError):
    pass


class DegenerateConfiguration(StitchError):
    pass


class AffineWarp(StitchError):
    """The homography has no projective part (h7 = h8 = 0)."""


class NoNonOverlap(StitchError):
    """The target is fully covered by the reference footprint."""


class ParallelConstraintLines(StitchError):
    pass


class OutOfBounds(StitchError):
    pass


class TooFewSamples(StitchError):
    pass


class InsufficientInliers(StitchError):
    pass


class DisconnectedGraph(StitchError):
    def __init__(self, unreachable):
        self.unreachable = sorted(unreachable)
        super().__init__(f"images not connected to the reference: {self.unreachable}")


class EmptySet(StitchError):
    pass


class EmptyOverlap(StitchError):
    pass


class TooFew(StitchError):
    pass


class PipelineError(StitchError):
    """Wraps a failure inside one named pipeline step."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step '{step}' failed: {cause}")


class FoldOverWarning(UserWarning):
    pass


class RankDeficientWarning(UserWarning):
    pass


class NonConvergenceWarning(UserWarning):
    pass
