"""Graph transformers over snowball graph convolutions for brain-network classification.

Everything runs on a small numpy autodiff engine in :mod:`tsen.tensor`.
"""
from .graph import Dataset, Graph, build_graph, generate_synthetic, load_dataset, split_dataset
from .layers import VARIANTS, ModelConfig, ModelParams, forward, init_params, predict
from .training import TrainConfig, run_experiment, train

__all__ = ["Dataset", "Graph", "ModelConfig", "ModelParams", "TrainConfig", "VARIANTS", "build_graph",
           "forward", "generate_synthetic", "init_params", "load_dataset", "predict", "run_experiment",
           "split_dataset", "train"]
__version__ = "0.1.0"
