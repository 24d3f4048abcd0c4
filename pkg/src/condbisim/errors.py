"""Exception types shared across the package."""


class CondBisimError(Exception):
    """Base class for all package errors."""


class SchemaError(CondBisimError, ValueError):
    pass


class StochasticityError(CondBisimError, ValueError):
    pass


class UnknownKind(CondBisimError, ValueError):
    pass


class ParamRange(CondBisimError, ValueError):
    pass


class BlockStructureError(CondBisimError):
    """Raised when the observation map is not invertible (two states share an observation)."""


class MapDomainError(CondBisimError, ValueError):
    pass


class LengthMismatch(CondBisimError, ValueError):
    pass


class DimensionMismatch(CondBisimError, ValueError):
    pass


class ShapeMismatch(CondBisimError, ValueError):
    pass


class Infeasible(CondBisimError, ValueError):
    pass


class NonConvergence(CondBisimError, RuntimeError):
    pass


class SingularSystem(CondBisimError, RuntimeError):
    pass


class NaNGuard(CondBisimError, FloatingPointError):
    pass


class DivergenceGuard(CondBisimError, FloatingPointError):
    pass


class ModeMismatch(CondBisimError, ValueError):
    pass


class UnknownContext(CondBisimError, KeyError):
    pass


class DegenerateGrid(CondBisimError, ValueError):
    pass


class EmptyResults(CondBisimError, ValueError):
    pass


class ConfigError(CondBisimError, ValueError):
    pass
