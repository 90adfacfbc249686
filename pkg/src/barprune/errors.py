"""Exception hierarchy shared by every barprune module."""


class BarPruneError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BarPruneError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(BarPruneError, RuntimeError):
    """A call violated an operation's precondition."""


class SpecError(BarPruneError, ValueError):
    """A network specification is inconsistent."""


class GraphError(BarPruneError, RuntimeError):
    """A cost or pruning graph could not be resolved."""


class ConfigError(BarPruneError, ValueError):
    """Invalid or incomplete configuration."""


class IntegrityError(BarPruneError, IOError):
    """A binary file failed its magic-number or CRC check."""


class BudgetViolation(BarPruneError, RuntimeError):
    """A pruned network ended above its budget."""
