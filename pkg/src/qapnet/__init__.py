"""Quantization-aware pruning for small fully-connected classifiers."""

from .data import Dataset, SplitSpec, fit_standardizer, kfold, load_csv, randomize_labels, split, synth_generate
from .metrics import MetricsReport, bops_layer, bops_model, evaluate, neural_efficiency
from .nn import MLPConfig, Model, TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .prune import PruneSchedule, global_rank, prune_step, run_qap
from .quant import QuantSpec, quantize

__version__ = "0.1.0"
