"""Network-safe coordination of thermostatically controlled loads.

Modules: ``grid`` (radial power flow), ``tcl`` (device fleet), ``loads``
(uncontrollable loads), ``aggregator`` (bin model and command choice),
``utility`` (probabilistic constraint-set construction), ``opf`` (the
per-device benchmark), ``harness`` (closed-loop scenarios) and ``cli``.
"""

from .aggregator import ConstraintSet, build_bin_model, choose_command
from .errors import ConfigError
from .grid import FeederModel, NodalInjection, generate_feeder, solve_distflow, solve_lindistflow
from .harness import ScenarioConfig, build_scenario, compare_controllers, run_scenario
from .loads import DiscreteLoadModel, LoadModel
from .utility import SafetyConfig, UtilityObservation, construct_constraint_set, test_command

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConstraintSet", "DiscreteLoadModel", "FeederModel", "LoadModel", "NodalInjection",
    "SafetyConfig", "ScenarioConfig", "UtilityObservation", "build_bin_model", "build_scenario", "choose_command",
    "compare_controllers", "construct_constraint_set", "generate_feeder", "run_scenario", "solve_distflow",
    "solve_lindistflow", "test_command",
]
