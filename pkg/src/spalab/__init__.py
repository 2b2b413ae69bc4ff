"""Sparse adversarial attacks, structured budgets, cascade evaluation and adversarial training."""

from .data import Dataset, SyntheticSpec, load_cifar10, make_synthetic
from .ensemble import CascadeReport, saa
from .models import Model, TrainConfig, load_checkpoint, make_cnn, make_mlp, save_checkpoint, sgd_train
from .rs import rs_attack
from .spgd import AttackOutcome, SpgdConfig, spgd_attack
from .structured import GroupSpec, approx_group_l0, exact_group_l0, spgd_structured_attack
from .advtrain import AdvTrainConfig, sat_train, strades_train
from .campaign import CampaignResult, run_campaign, transfer_eval
from .viz import export_perturbation_image

__version__ = "0.1.0"
