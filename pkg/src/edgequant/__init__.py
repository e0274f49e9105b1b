"""Post-training quantization toolkit for small image classifiers."""

from .builders import FAMILIES, build_architecture
from .container import load, save
from .datakit import LabeledDataset, SplitSpec, split, synth_generate
from .engine import ExecMode, Executor
from .evalkit import AccuracyPriority, SizePriority, compare, evaluate, select_model
from .graph import Graph, Node, fold_batchnorm, param_count
from .quantizer import CalibrationStats, calibrate, quantize_dynamic, quantize_fp16, quantize_full
from .tensor import DType, QuantParams, Tensor
from .trainer import TrainConfig, replace_head, train

__version__ = "0.1.0"

__all__ = [
    "FAMILIES", "build_architecture", "load", "save",
    "LabeledDataset", "SplitSpec", "split", "synth_generate",
    "ExecMode", "Executor",
    "AccuracyPriority", "SizePriority", "compare", "evaluate", "select_model",
    "Graph", "Node", "fold_batchnorm", "param_count",
    "CalibrationStats", "calibrate", "quantize_dynamic", "quantize_fp16", "quantize_full",
    "DType", "QuantParams", "Tensor",
    "TrainConfig", "replace_head", "train",
]
