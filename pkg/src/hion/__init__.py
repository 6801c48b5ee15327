"""Hamiltonian-informed optimal neural controllers on the T-mano architecture."""

from .checkpoint import Checkpoint
from .controller import ControllerOutput, TmanoController
from .errors import ConfigError, HionError, NumericOverflowError, SimulationAborted, SingularityError, TrainingAborted
from .jets import Jet
from .pmp import LossBreakdown
from .simulator import HionPolicy, Scenario, Trajectory, comparison_scenario, metrics, rk4_step, run_closed_loop
from .slmpc import SlmpcConfig, SlmpcPolicy, linearize, solve_step
from .systems import CostSpec, StateDistribution, make_system
from .training import TrainConfig, finetune, train

__all__ = [
    "Checkpoint", "ConfigError", "ControllerOutput", "CostSpec", "HionError", "HionPolicy", "Jet",
    "LossBreakdown", "NumericOverflowError", "Scenario", "SimulationAborted", "SingularityError",
    "SlmpcConfig", "SlmpcPolicy", "StateDistribution", "TmanoController", "TrainConfig",
    "TrainingAborted", "Trajectory", "comparison_scenario", "finetune", "linearize", "make_system",
    "metrics", "rk4_step", "run_closed_loop", "solve_step", "train",
]
