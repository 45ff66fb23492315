"""Energy-aware configuration of edge-assisted mobile AR clients."""

from .aio import OffloadPreference, OrchestratorState, SceneModel, solve_rho, step
from .energy_model import (
    ClientSpec,
    Configuration,
    DeviceProfile,
    DomainError,
    EnergyBreakdown,
    ProfileError,
    accuracy,
    energy_per_frame,
    latency_per_frame,
    objective_term,
)
from .harness import Report, Scenario, default_scenario, load_scenario, run_aio_scenario, run_leaf_scenario
from .leaf_solver import Allocation, InfeasibleError, SolverConfig, allocate_bandwidth, solve
from .profiles import default_profile, load_profile

__version__ = "0.1.0"
