"""Budget-constrained structured pruning of residual networks."""

from .errors import (
    BarPruneError,
    BudgetViolation,
    ConfigError,
    ContractError,
    DimensionError,
    GraphError,
    IntegrityError,
    SpecError,
)

__version__ = "0.1.0"

__all__ = [
    "BarPruneError",
    "BudgetViolation",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "GraphError",
    "IntegrityError",
    "SpecError",
    "__version__",
]
