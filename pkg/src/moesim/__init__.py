"""Trace-driven simulator for expert prefetching in MoE inference."""

from .cache import CacheConfig, ExpertCache
from .core import (
    DEFAULT_SHAPE,
    ActivationMatrix,
    ConfigError,
    DimensionError,
    ModelShape,
    PromptTrace,
    RangeError,
    TokenRecord,
    cosine_similarity,
    normalize,
)
from .engine import ReplayConfig, SimReport, replay_prompt, replay_traces, sweep
from .learner import LearnerConfig, LinearModel, predict_topk, train
from .metrics import activation_report, label_accuracy, macro_f1, position_accuracy
from .predictors import PredictionContext, make_predictor
from .sketches import EamcConfig, SketchCollection, build_eamc, kmeans
from .traceio import (
    GeneratorConfig,
    ParseError,
    generate_synthetic,
    parse_predictions,
    parse_trace_csv,
    write_predictions_jsonl,
    write_trace_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationMatrix",
    "CacheConfig",
    "ConfigError",
    "DEFAULT_SHAPE",
    "DimensionError",
    "EamcConfig",
    "ExpertCache",
    "GeneratorConfig",
    "LearnerConfig",
    "LinearModel",
    "ModelShape",
    "ParseError",
    "PredictionContext",
    "PromptTrace",
    "RangeError",
    "ReplayConfig",
    "SimReport",
    "SketchCollection",
    "TokenRecord",
    "activation_report",
    "build_eamc",
    "cosine_similarity",
    "generate_synthetic",
    "kmeans",
    "label_accuracy",
    "macro_f1",
    "make_predictor",
    "normalize",
    "parse_predictions",
    "parse_trace_csv",
    "position_accuracy",
    "predict_topk",
    "replay_prompt",
    "replay_traces",
    "sweep",
    "train",
    "write_predictions_jsonl",
    "write_trace_csv",
]
