"""Class-incremental learning benchmark: replay, distillation, a
neighbor-effect loss over frozen-model nearest neighbors, and inference-time
momentum-head debiasing, with a config-driven experiment harness."""

from .config import ExperimentConfig, load_config
from .harness import PreparedData, RunResult, prepare_data, run_experiment, sweep
from .kernels import BACKEND
from .protocol import Dataset, gen_synthetic, load_dataset, order_classes

__all__ = [
    "BACKEND",
    "Dataset",
    "ExperimentConfig",
    "PreparedData",
    "RunResult",
    "gen_synthetic",
    "load_config",
    "load_dataset",
    "order_classes",
    "prepare_data",
    "run_experiment",
    "sweep",
]
