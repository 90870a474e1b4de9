"""Adversarial transfer from undertrained surrogates, at desk scale.

A numpy autograd core, small image classifiers, gradient-sign attacks,
checkpoint epoch sweeps and the diagnostics that explain them.
"""

from importlib import resources
from pathlib import Path

from .attacks import AttackSpec, ILAParams, TAPParams, fgsm, ifgsm, ila_enhance, mifgsm, run_attack, tap
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .datasets import Dataset, load_cifar10_binary, load_mnist_dir, load_mnist_idx, synth_gaussians
from .diagnostics import curvature, explanatory_model, gradient_similarity, ols_fit, pearson
from .models import ArchitectureDescriptor, Model, build_model, forward, input_gradient
from .pipeline import run_pipeline
from .tensor import Tensor, precision
from .training import (CheckpointStore, CyclicSchedule, FastFGSM, SteppedSchedule, TrainConfig,
                       adversarial_train_fgsm, select_fully_trained, train)
from .transfer import TransferMatrix, best_surrogate_epoch, epoch_sweep, evaluate_accuracy, transfer_cell

__version__ = "0.1.0"


def bundled_config(name: str = "synthetic") -> Path:
    """Path of a config shipped with the package (``synthetic`` or ``mnist_desk``)."""
    p = resources.files(__name__) / "configs" / f"{name}.toml"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled config {name!r}")
    return Path(str(p))
