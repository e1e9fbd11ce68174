"""Spatially transformed adversarial examples on a small numpy autodiff core."""

from .attacks import (
    AttackOutcome,
    adaptive_blur_attack,
    cw_attack,
    fgsm_attack,
    pgd_attack,
    stadv_attack,
    stadv_attack_gridsearch,
)
from .datasets import Dataset, FormatError, load_cifar10, load_mnist
from .defenses import BlurDefended, DefenseReport, evaluate_defense, mean_blur_restore
from .losses import AttackObjectiveConfig, adv_loss, adv_loss_untargeted, flow_loss, total_objective
from .metrics import flow_l2_metric, flow_tv_metric
from .models import Classifier, build_model, predict
from .solver import LbfgsConfig, SolveTrace, lbfgs_minimize
from .tensor import Tensor
from .trainer import TrainConfig, TrainReport, accuracy, train
from .warp import bilinear_warp, warp_gradient_check, warp_image

__version__ = "0.1.0"
