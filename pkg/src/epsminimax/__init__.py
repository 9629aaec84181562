"""Epsilon-minimax decision rules by mirror descent over a finite menu of rules."""

from .finite_game import MatrixGame, lp_minimax, mirror_ascent_maximin
from .hedge import (
    ConfigError,
    HedgeError,
    NumericalFailure,
    OracleContractError,
    OracleResponse,
    SimplexPoint,
    SolverConfig,
    SolverResult,
    compute_schedule,
    hedge_solve,
    hedge_solve_stochastic,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "HedgeError",
    "MatrixGame",
    "NumericalFailure",
    "OracleContractError",
    "OracleResponse",
    "SimplexPoint",
    "SolverConfig",
    "SolverResult",
    "compute_schedule",
    "hedge_solve",
    "hedge_solve_stochastic",
    "lp_minimax",
    "mirror_ascent_maximin",
]
