"""Discrete-event simulator of asynchronous federated learning over a
proof-of-work blockchain: mining, gossip, forks, and the freshness (age) of
the model updates carried in each block."""

from .config import ExperimentConfig, SweepSpec, load_config, load_sweep
from .simulation import RunResult, Simulation, run_experiment
from .outputs import write_run

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "SweepSpec",
    "load_config",
    "load_sweep",
    "RunResult",
    "Simulation",
    "run_experiment",
    "write_run",
    "__version__",
]
