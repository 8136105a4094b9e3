"""Exception hierarchy shared by all modules."""


class MgCoordError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(MgCoordError, ValueError):
    pass


class SingularSystem(MgCoordError):
    pass


class RankDeficient(MgCoordError):
    pass


class UnknownPartition(MgCoordError, IndexError):
    pass


class NonSeparableConstraint(MgCoordError):
    """A row of ``A`` touches variables of more than one partition."""

    def __init__(self, row, partitions):
        self.row = int(row)
        self.partitions = sorted(int(k) for k in partitions)
        super().__init__(
            f"constraint row {self.row} spans partitions {self.partitions}"
        )


class SingularPartition(MgCoordError):
    def __init__(self, k, message="partition KKT matrix is singular"):
        self.k = int(k)
        super().__init__(f"partition {self.k}: {message}")


class InvalidSchedule(MgCoordError):
    pass


class NotConverged(MgCoordError):
    pass


class DimensionCap(MgCoordError):
    pass


class PowerIterationStall(MgCoordError):
    def __init__(self, estimate, spread):
        self.estimate = float(estimate)
        self.spread = float(spread)
        super().__init__(
            f"power iteration did not settle: estimate {self.estimate:.6g}, "
            f"spread {self.spread:.3g} over the last window"
        )


class NotTwoColorable(MgCoordError):
    pass


class MissingMetadata(MgCoordError, KeyError):
    pass


class NonDivisor(MgCoordError, ValueError):
    pass


class InfeasibleCoarse(MgCoordError):
    pass


class ConfigError(MgCoordError, ValueError):
    pass
