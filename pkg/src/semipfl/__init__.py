"""Semi-supervised personalized federated learning simulator with a FedAVG baseline."""

from .config import ExperimentConfig, load_config
from .orchestrator import RunResult, footprint, prepare_experiment, run_fedavg, run_semipfl

__all__ = ["ExperimentConfig", "RunResult", "footprint", "load_config", "prepare_experiment",
           "run_fedavg", "run_semipfl"]
__version__ = "0.1.0"
