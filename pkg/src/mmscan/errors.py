"""Exception hierarchy.

Every error raised on bad input derives from :class:`DegenerateInput` (CLI exit
code 2); solver failures derive from :class:`NonConvergence` (exit code 3).
"""


class MMScanError(Exception):
    exit_code = 1


class DegenerateInput(MMScanError, ValueError):
    exit_code = 2


class NonConvergence(MMScanError, RuntimeError):
    exit_code = 3


class PointBehindCamera(DegenerateInput):
    pass


class DegenerateRays(DegenerateInput):
    pass


class IllConditioned(DegenerateInput):
    pass


class AmbiguousTarget(DegenerateInput):
    pass


class ScaleMismatch(DegenerateInput):
    pass


class UnderconstrainedMotion(DegenerateInput):
    pass


class TargetNotVisible(DegenerateInput):
    pass


class FrameMismatch(DegenerateInput):
    pass
