"""Simulation designs, evaluation metrics, the linear baseline and rolling validation."""

from .baseline import alpha_pca_fit
from .bench import BENCH_COLUMNS, BenchRow, run_bench
from .metrics import ccor
from .rolling import RollingResult, rolling_validate
from .simulate import CASES, SimulatedData, SimulationSpec, simulate_case

__all__ = [
    "alpha_pca_fit",
    "BENCH_COLUMNS",
    "BenchRow",
    "run_bench",
    "ccor",
    "RollingResult",
    "rolling_validate",
    "CASES",
    "SimulatedData",
    "SimulationSpec",
    "simulate_case",
]
