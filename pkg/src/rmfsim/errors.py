"""Exception taxonomy shared by all rmfsim modules."""


class SimError(Exception):
    """Base class for all rmfsim errors."""


# -- parameter / config validation ------------------------------------------

class BadDimension(SimError):
    pass


class NegativeWeight(SimError):
    pass


class ResetAboveBase(SimError):
    pass


class NonPositiveRate(SimError):
    pass


class SupportBelowFloor(SimError):
    pass


class ConfigInvalid(SimError):
    pass


# -- randomness --------------------------------------------------------------

class RegionOutOfBounds(SimError):
    pass


class MTooSmall(SimError):
    pass


# -- simulation engines ------------------------------------------------------

class IntensityOverflow(SimError):
    pass


class HorizonNonPositive(SimError):
    pass


class DecayNotSupported(SimError):
    pass


class GridTooShort(SimError):
    pass


class InputHorizonMismatch(SimError):
    pass


class NoConvergence(SimError):
    pass


# -- statistics --------------------------------------------------------------

class InsufficientPaths(SimError):
    pass


class LatticeMismatch(SimError):
    pass


class GridMismatch(SimError):
    pass


class NotStationary(SimError):
    pass


# -- experiment runner -------------------------------------------------------

class OutputDirNotEmpty(SimError):
    pass


class IncompleteRun(SimError):
    pass
