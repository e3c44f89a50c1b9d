"""Graph in-context learning with generated, selected and cached prompts."""
from .augmenter import PromptCache
from .estimator import GraphPrompter
from .graph import (Graph, InputPoint, EpisodeSpec, PointPool, generate_sbm,
                    generate_synthetic_kg, load_graph, make_point_pool, save_graph)
from .inference import InferenceConfig, evaluate, run_inference
from .model import ModelConfig, init_params
from .trainer import TrainConfig, pretrain

__version__ = "0.1.0"

__all__ = [
    "EpisodeSpec", "Graph", "GraphPrompter", "InferenceConfig", "InputPoint", "ModelConfig",
    "PointPool", "PromptCache", "TrainConfig", "evaluate", "generate_sbm",
    "generate_synthetic_kg", "init_params", "load_graph", "make_point_pool", "pretrain",
    "run_inference", "save_graph",
]
