"""Desk-scale knowledge distillation lab on small MLPs."""

from .bound import BoundReport, JointFitResult, NormKind, fit_joint_classifier, frobenius_distance, verify_bound
from .checkpoint import load_checkpoint, load_module, load_network, save_checkpoint
from .data import Dataset, canonical_task, load_dataset, make_blobs, make_spirals, save_dataset, standardize
from .distillers import DistillConfig, DistillOutcome, distill, evaluate, train_ce_only
from .nn import Classifier, Connector, FeatureExtractor, Network, init_network
from .tensor import Tensor
from .trainer import TrainConfig, run_epochs

__version__ = "0.1.0"

__all__ = [
    "BoundReport", "Classifier", "Connector", "Dataset", "DistillConfig", "DistillOutcome",
    "FeatureExtractor", "JointFitResult", "Network", "NormKind", "Tensor", "TrainConfig",
    "canonical_task", "distill", "evaluate", "fit_joint_classifier", "frobenius_distance",
    "init_network", "load_checkpoint", "load_dataset", "load_module", "load_network",
    "make_blobs", "make_spirals", "run_epochs", "save_checkpoint", "save_dataset",
    "standardize", "train_ce_only", "verify_bound",
]
