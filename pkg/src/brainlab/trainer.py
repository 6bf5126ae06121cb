"""Proposal-refreshing amortized inference (the BRAIn training loop).

Per epoch: draw ``m`` prompts, sample ``n`` outcomes for each from the frozen
proposal, cache ``log q'``, ``log p``, rewards and ``alpha_hat``, append to the
replay dataset; take ``k`` optimizer steps on random replay batches with
``beta_hat`` recomputed from the live policy; then refresh the proposal to the
live policy. The DPO-sft family keeps the proposal pinned to the prior.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .divergences import DistributionTable, exact_posterior, kl_exact, log_evidence, snkl_mc
from .errors import ConfigError, DivergenceError, InvalidInputError, SupportError
from .estimators import ESTIMATORS, PAIRWISE, SampleBatch, estimate, make_batch
from .policies import Policy
from .rewards import RewardModel

log = logging.getLogger(__name__)

PRIOR_PROPOSAL = ("dpo", "dpo_sft_iw", "dpo_sft_iw_n")


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.name!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


@dataclass(frozen=True)
class TrainerConfig:
    e: int = 40
    m: int = 4
    n: int = 32
    k: int = 250
    estimator: str = "brain"
    gamma: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lr: float = 1e-2
    batch_prompts: int = 4
    seed: int = 0
    eval_every: int = 250
    eval_samples: int = 8
    snkl_batches: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        for name in ("m", "n", "batch_prompts", "eval_every", "eval_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("e", "k", "snkl_batches"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; choose from {', '.join(ESTIMATORS)}")
        if self.estimator in PAIRWISE + ("dpo_sft_iw_n",) and self.n < 2:
            raise ConfigError(f"{self.estimator} requires n ≥ 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "OptimizerState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def optimizer_step(state: OptimizerState, grad: np.ndarray, params: np.ndarray, lr: float,
                   config: OptimizerConfig) -> tuple[np.ndarray, OptimizerState]:
    """One ascent step. Adam uses bias-corrected moments and decoupled weight decay."""
    grad = np.asarray(grad, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if grad.shape != params.shape:
        raise InvalidInputError("gradient and parameter shapes differ")
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite gradient", state.t + 1)
    if config.name == "sgd":
        return params + lr * grad, OptimizerState(state.m, state.v, state.t + 1)
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    new = params + lr * m_hat / (np.sqrt(v_hat) + config.eps) - lr * config.weight_decay * params
    return new, OptimizerState(m, v, t)


@dataclass(frozen=True)
class MetricRow:
    step: int
    kl_to_posterior: float
    mean_reward: float
    snkl: float | None
    logratio_kl: float


@dataclass
class TrainRun:
    q_theta: Policy
    q_prime: Policy
    dataset: list[SampleBatch]
    optimizer_state: OptimizerState
    metrics: list[MetricRow] = field(default_factory=list)
    checkpoints: list[tuple[int, Policy]] = field(default_factory=list)
    config: TrainerConfig | None = None

    @property
    def final(self) -> MetricRow:
        return self.metrics[-1]

    def best_checkpoint(self) -> tuple[int, Policy]:
        """Minimal exact KL when available, otherwise maximal mean reward."""
        rows = {r.step: r for r in self.metrics}
        if all(np.isfinite(r.kl_to_posterior) for r in self.metrics):
            key = lambda c: rows[c[0]].kl_to_posterior
        else:
            key = lambda c: -rows[c[0]].mean_reward
        return min(self.checkpoints, key=key)


class Evaluator:
    """Metrics for one (prior, reward) task. Exact wherever the policy is enumerable."""

    def __init__(self, prior: Policy, reward: RewardModel, prompts: Sequence[int], n: int = 32,
                 eval_samples: int = 8, snkl_batches: int = 0):
        self.prior = prior
        self.reward = reward
        self.prompts = list(prompts)
        self.n = n
        self.eval_samples = eval_samples
        self.snkl_batches = snkl_batches
        self.enumerable = prior.enumerable
        self.posteriors: dict[int, DistributionTable] = {}
        self.rewards: dict[int, np.ndarray] = {}
        if self.enumerable:
            for x in set(self.prompts):
                post = exact_posterior(prior, reward, x)
                self.posteriors[x] = post
                if reward.has_reward:
                    self.rewards[x] = reward.rewards(x, post.outcomes)

    def __call__(self, step: int, q_theta: Policy, q_prime: Policy, rng: np.random.Generator) -> MetricRow:
        kls, means, ratios, snkls = [], [], [], []
        for x in sorted(set(self.prompts)):
            ys = q_theta.sample(x, self.eval_samples, rng)
            ratios.append(np.mean(q_theta.log_probs(x, ys) - self.prior.log_probs(x, ys)))
            if self.enumerable:
                table = DistributionTable.from_policy(q_theta, x)
                try:
                    kls.append(kl_exact(self.posteriors[x], table))
                except SupportError:  # q_theta underflowed to zero on posterior mass
                    kls.append(float("inf"))
                if self.reward.has_reward:
                    means.append(float(table.probs @ self.rewards[x]))
            elif self.reward.has_reward:
                means.append(float(np.mean(self.reward.rewards(x, ys))))
            if self.snkl_batches:
                snkls.append(snkl_mc(self.prior, self.reward, q_theta, q_prime, x, self.n,
                                     self.snkl_batches, rng).estimate)
        return MetricRow(
            step=step,
            kl_to_posterior=float(np.mean(kls)) if kls else float("nan"),
            mean_reward=float(np.mean(means)) if means else float("nan"),
            snkl=float(np.mean(snkls)) if snkls else None,
            logratio_kl=float(np.mean(ratios)),
        )


def train(prior: Policy, reward: RewardModel, prompts: Sequence[int], config: TrainerConfig,
          on_refresh: Callable[[int, int, Policy], None] | None = None) -> TrainRun:
    """Run the training loop and return the final state with its metric log.

    ``on_refresh(epoch, step, q_theta)`` fires after every epoch's ``k`` steps.
    """
    prompts = list(prompts)
    if not prompts:
        raise ConfigError("no prompts given")
    reward = reward.with_gamma(config.gamma)
    tag = config.estimator
    fixed_proposal = tag in PRIOR_PROPOSAL

    sample_seq, step_seq, eval_seq = np.random.SeedSequence(config.seed).spawn(3)
    sample_rng = np.random.default_rng(sample_seq)
    step_rng = np.random.default_rng(step_seq)
    eval_rng = np.random.default_rng(eval_seq)

    evaluate = Evaluator(prior, reward, prompts, config.n, config.eval_samples, config.snkl_batches)
    z_exact = {}
    if tag in ("gdc", "gdcpp") and prior.enumerable:
        z_exact = {x: float(np.exp(log_evidence(prior, reward, x))) for x in set(prompts)}

    run = TrainRun(prior, prior, [], OptimizerState.zeros(prior.dim), config=config)
    run.metrics.append(evaluate(0, prior, prior, eval_rng))
    run.checkpoints.append((0, prior))
    params = prior.params.copy()
    step = 0

    for epoch in range(config.e):
        replace = config.m > len(prompts)
        chosen = sample_rng.choice(len(prompts), size=config.m, replace=replace)
        for i in chosen:
            x = prompts[int(i)]
            ys = run.q_prime.sample(x, config.n, sample_rng)
            run.dataset.append(make_batch(x, ys, prior, run.q_prime, reward))

        for _ in range(config.k):
            size = min(config.batch_prompts, len(run.dataset))
            picks = step_rng.choice(len(run.dataset), size=size, replace=False)
            grad = np.zeros(prior.dim)
            try:
                for j in picks:
                    batch = run.dataset[int(j)]
                    grad += estimate(tag, batch, run.q_theta, prior, z_exact.get(batch.x))
            except InvalidInputError as exc:  # log-probs underflowed or overflowed
                raise DivergenceError(f"{tag} estimate failed: {exc}", step + 1) from exc
            if not np.isfinite(grad).all():
                raise DivergenceError(f"non-finite {tag} gradient", step + 1)
            params, run.optimizer_state = optimizer_step(run.optimizer_state, grad, params,
                                                         config.lr, config.optimizer)
            if not np.isfinite(params).all():
                raise DivergenceError("parameters became non-finite", step + 1)
            run.q_theta = run.q_theta.with_params(params)
            step += 1
            if step % config.eval_every == 0:
                run.metrics.append(evaluate(step, run.q_theta, run.q_prime, eval_rng))
                run.checkpoints.append((step, run.q_theta))

        if not fixed_proposal:
            run.q_prime = run.q_theta  # immutable, so this is a snapshot
        if on_refresh is not None:
            on_refresh(epoch + 1, step, run.q_theta)
        log.debug("epoch %d done at step %d: %s", epoch + 1, step, run.metrics[-1])

    if run.metrics[-1].step != step:
        run.metrics.append(evaluate(step, run.q_theta, run.q_prime, eval_rng))
        run.checkpoints.append((step, run.q_theta))
    return run
