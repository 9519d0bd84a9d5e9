"""Exception types raised across the package."""


class MapflowError(Exception):
    pass


class MassDeficitNegative(MapflowError, ValueError):
    pass


class InvalidExponent(MapflowError, ValueError):
    pass


class DivergentExposure(MapflowError, ArithmeticError):
    pass


class StepCapExceeded(MapflowError, RuntimeError):
    pass


class DivisionAtAbsorption(MapflowError, ZeroDivisionError):
    pass


class StartOffGrid(MapflowError, ValueError):
    pass


class EvaluationNearPole(MapflowError, ArithmeticError):
    pass


class TimeBeyondHorizon(MapflowError, ValueError):
    pass


class BudgetExceeded(MapflowError, RuntimeError):
    pass


class TruncatedAncestor(MapflowError, LookupError):
    pass


class NoCoalescence(MapflowError):
    pass


class EmptySample(MapflowError, ValueError):
    pass


class ConfigError(MapflowError, ValueError):
    pass
