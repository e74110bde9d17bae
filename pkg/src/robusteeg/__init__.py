"""Adversarially robust EEG emotion classification in numpy.

An Inception-style classifier over differential-entropy feature maps, FGSM
and PGD attacks, and training with adversarial perturbations of both the
inputs and the weights.
"""

from .attacks import AttackConfig, ThreatModel, attack, fgsm, pgd, project
from .datasets import Dataset, DatasetFileError, read_dataset, synth_generate, write_dataset
from .evaluation import (MetricsReport, ablation_run, aggregate, evaluate, evaluate_robust, gamma_sweep,
                         loso_split, run_fold, run_folds)
from .features import Band, RawRecording, de_features, preprocess
from .model import BuildError, IncModel, ModelConfig, WeightFileError, build_inc, load_weights, save_weights
from .tensor import Tensor
from .training import TrainConfig, TrainingLog, TSPConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ThreatModel", "attack", "fgsm", "pgd", "project",
    "Dataset", "DatasetFileError", "read_dataset", "synth_generate", "write_dataset",
    "MetricsReport", "ablation_run", "aggregate", "evaluate", "evaluate_robust", "gamma_sweep",
    "loso_split", "run_fold", "run_folds",
    "Band", "RawRecording", "de_features", "preprocess",
    "BuildError", "IncModel", "ModelConfig", "WeightFileError", "build_inc", "load_weights", "save_weights",
    "Tensor",
    "TrainConfig", "TrainingLog", "TSPConfig", "fit",
]
