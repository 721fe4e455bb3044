"""Exception hierarchy shared by the pipeline stages.

Everything derives from ``PetmapError`` so the CLI can map data problems to
exit code 2 without catching unrelated bugs.
"""


class PetmapError(Exception):
    pass


class DegenerateConfiguration(PetmapError, ValueError):
    pass


class TooFewPoints(PetmapError, ValueError):
    pass


class PointAtInfinity(PetmapError, ArithmeticError):
    pass


class StaleFrame(PetmapError, ValueError):
    pass


class RoiOutOfBounds(PetmapError, ValueError):
    pass


class NonMonotonicTimestamp(PetmapError, ValueError):
    pass


class InvalidDomain(PetmapError, ValueError):
    pass


class DimensionMismatch(PetmapError, ValueError):
    pass


class InvalidRange(PetmapError, ValueError):
    pass


class StorageFailure(PetmapError, OSError):
    pass


class InvalidConfig(PetmapError, ValueError):
    pass
