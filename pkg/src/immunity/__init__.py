"""Mixture-of-experts image classifier with a random switch gate, heatmap
diversity and stability regularizers, and an evasion-attack harness."""

from .attacks import AdversarialBatch, AttackSpec, run_attack
from .data import Dataset, DatasetMeta, load_cifar_binary, load_dataset, save_dataset, synth_shapes
from .estimator import ImmunityClassifier
from .model import (MoEModel, RsgMode, SingleExpertClassifier, build_moe, build_single,
                    deserialize_model, load_model, save_model, serialize_model)
from .tensor import Tensor, backward, grad_check
from .training import EvalReport, SGD, TrainConfig, cscore, evaluate, iscore, train_model

__all__ = [
    "AdversarialBatch", "AttackSpec", "Dataset", "DatasetMeta", "EvalReport",
    "ImmunityClassifier", "MoEModel", "RsgMode", "SGD", "SingleExpertClassifier",
    "Tensor", "TrainConfig", "backward", "build_moe", "build_single", "cscore",
    "deserialize_model", "evaluate", "grad_check", "iscore", "load_cifar_binary",
    "load_dataset", "load_model", "run_attack", "save_dataset", "save_model",
    "serialize_model", "synth_shapes", "train_model",
]

__version__ = "0.1.0"
