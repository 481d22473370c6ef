"""Equilibrium pricing among risk-neutral agents with heterogeneous Markovian beliefs."""

from .equilibrium import (
    EquilibriumReport,
    MarketMismatch,
    StrategyProfile,
    SupermartingaleReport,
    bubble_decomposition,
    check_clearing,
    evaluate_pnl,
    extract_strategies,
    verify_supermartingale,
)
from .mc import ControlSelector, PathBundle, SimConfig, estimate_value, lattice_oracle, simulate
from .models import (
    AgentModel,
    ClippedAffine,
    MarketSpec,
    ModelError,
    PayoffSpec,
    build_model,
    eval_coefficients,
    validate_regularity,
)
from .pde import CFLError, Grid, SchemeError, ValueSurface, auto_grid, solve_equilibrium, solve_fundamental

__version__ = "0.1.0"
