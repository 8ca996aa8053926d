"""Mean-field game lane-change planning with heterogeneous driving styles."""

from .core import (DrivingStyle, LaneGeometry, ScenarioConfig, StateBounds, StyleClass, VehicleState,
                   build_scenario, style_catalog)
from .equilibrium import EquilibriumState, SolverParams, run_equilibrium
from .simulate import SimParams, plan_from_equilibrium, simulate

__version__ = "0.1.0"

__all__ = [
    "DrivingStyle", "LaneGeometry", "ScenarioConfig", "StateBounds", "StyleClass", "VehicleState",
    "build_scenario", "style_catalog", "EquilibriumState", "SolverParams", "run_equilibrium",
    "SimParams", "plan_from_equilibrium", "simulate",
]
