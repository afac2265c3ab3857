"""Module robust pruning and fine-tuning (MRPF) on a small numpy autodiff core."""

from .attacks import AttackConfig, apgd, attack, fgsm, generate_adversarial_set, pgd
from .data import Dataset, DatasetSpec, make_synthetic_dataset
from .losses import LossConfig
from .mrs import MrsConfig, MrsReport, compute_mrs
from .network import Network, build, flops_reduction, forward, remove_channels
from .pipeline import RunConfig, RunRecord, evaluate_metrics, finetune, mrpf_run, toy_config
from .pruning import (
    RatioConfig,
    allocate_ratios_deviation,
    allocate_ratios_invmrs,
    magnitude_importance,
    plan_pruning,
    taylor_importance,
)
from .runstore import load_run, persist_run

__version__ = "0.1.0"
