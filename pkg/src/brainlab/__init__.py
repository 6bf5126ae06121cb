"""Reward-conditioned posterior distillation (BRAIn, GDC, GDC++, DPO) on exactly enumerable toy policies."""

__version__ = "0.1.0"

from .divergences import DistributionTable, exact_posterior, kl_exact, ppo_optimal_policy, snkl_exact, snkl_mc
from .estimators import (
    ESTIMATORS,
    SampleBatch,
    alpha_hat_bt,
    alpha_hat_general,
    beta_hat,
    brain_gradient,
    dpo_gradient,
    estimate,
    make_batch,
)
from .oracle import Task, expected_estimator_gradient, finite_difference_grad, variance_experiment
from .policies import BigramPolicy, CategoricalPolicy, GaussianPolicy, Policy, load_policy
from .rewards import AnalyticReward, GoodnessModel, TableReward, fit_bradley_terry
from .tasks import build_task
from .trainer import OptimizerConfig, TrainerConfig, train
