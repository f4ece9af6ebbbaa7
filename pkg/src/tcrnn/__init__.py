"""Thermodynamically consistent recurrent constitutive models on a small numpy autodiff."""

from .autodiff import Graph, GraphError, Node, NonFiniteError, finite_difference_check
from .datagen import (ElastoPlasticParams, LoadingProgram, MaterialPath, BENCHMARK_INCREMENTS,
                      augment_time_consistency, generate_path, benchmark_dataset, perturb_stress)
from .evaluate import (EvalReport, Rollout, SweepSpec, baseline_rollout, evaluate_paths,
                       open_loop_rollout, relative_error, rollout_paths, run_sweep, spearman)
from .nets import DenseStack, GruCell, SequenceWindow, VanillaRnnCell
from .pipeline import (BaselineModel, LossWeights, TrainConfig, load_checkpoint,
                       save_checkpoint, train, train_baseline)
from .standardize import StandardizationStats
from .thermo import TcrnnModel, forward_all, predict_dissipation, predict_stress

__version__ = "0.1.0"

__all__ = [
    "BaselineModel", "DenseStack", "ElastoPlasticParams", "EvalReport", "Graph", "GraphError",
    "GruCell", "LoadingProgram", "LossWeights", "MaterialPath", "Node", "NonFiniteError",
    "BENCHMARK_INCREMENTS", "Rollout", "SequenceWindow", "StandardizationStats", "SweepSpec",
    "TcrnnModel", "TrainConfig", "VanillaRnnCell", "augment_time_consistency",
    "baseline_rollout", "evaluate_paths", "finite_difference_check", "forward_all",
    "generate_path", "load_checkpoint", "open_loop_rollout", "benchmark_dataset",
    "perturb_stress", "predict_dissipation", "predict_stress", "relative_error",
    "rollout_paths", "run_sweep", "save_checkpoint", "spearman", "train", "train_baseline",
]
