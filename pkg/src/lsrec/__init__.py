"""Item-token Llama-style sequential recommender (numpy)."""

from .dataset import Corpus, Vocabulary, build_corpus, load_corpus, save_corpus
from .evaluator import MetricsReport, evaluate
from .model import PRESETS, ModelConfig, forward, init_params, preset
from .promptgen import TaskKind
from .trainer import TrainOptions, train

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "Vocabulary",
    "build_corpus",
    "load_corpus",
    "save_corpus",
    "MetricsReport",
    "evaluate",
    "PRESETS",
    "ModelConfig",
    "forward",
    "init_params",
    "preset",
    "TaskKind",
    "TrainOptions",
    "train",
]
