"""Exact posteriors and (self-normalized) KL divergences."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_softmax, logsumexp

from .errors import InvalidInputError, NotEnumerableError, SupportError, UnsupportedError
from .policies import Policy
from .rewards import RewardModel

DEFAULT_TUPLE_CAP = 100_000


@dataclass(frozen=True, eq=False)
class DistributionTable:
    probs: np.ndarray
    outcomes: tuple

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64).reshape(-1)
        outcomes = tuple(self.outcomes)
        if probs.size != len(outcomes):
            raise InvalidInputError("probs and outcomes differ in length")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-10:
            raise InvalidInputError("probabilities must be non-negative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "outcomes", outcomes)

    def prob(self, y) -> float:
        return float(self.probs[self.outcomes.index(y)])

    def as_dict(self) -> dict:
        return dict(zip(self.outcomes, self.probs.tolist()))

    @classmethod
    def from_policy(cls, policy: Policy, x: int) -> "DistributionTable":
        support = policy.enumerate_support(x)
        probs = np.array([p for _, p in support])
        return cls(probs / probs.sum(), [y for y, _ in support])


def _support(prior, x):
    if isinstance(prior, DistributionTable):
        return list(prior.outcomes), np.asarray(prior.probs)
    support = prior.enumerate_support(x)  # raises NotEnumerableError
    return [y for y, _ in support], np.array([p for _, p in support])


def exact_posterior(prior: Policy | DistributionTable, reward: RewardModel, x: int) -> DistributionTable:
    """``p(y|x) p(G=1|x,y)`` normalized over the enumerated support."""
    outcomes, p = _support(prior, x)
    with np.errstate(divide="ignore"):
        logw = np.log(p) + reward.goodness_logs(x, outcomes)
    return DistributionTable(np.exp(logw - logsumexp(logw)), outcomes)


def log_evidence(prior: Policy | DistributionTable, reward: RewardModel, x: int) -> float:
    """``log sum_y p(y|x) exp(goodness_log(y))`` -- the target's normalizer."""
    outcomes, p = _support(prior, x)
    with np.errstate(divide="ignore"):
        return float(logsumexp(np.log(p) + reward.goodness_logs(x, outcomes)))


def ppo_optimal_policy(prior: Policy | DistributionTable, reward: RewardModel, x: int) -> DistributionTable:
    """Closed-form solution of KL-regularized reward maximization, ``p exp(r/gamma) / Z``."""
    if not reward.has_reward:
        raise UnsupportedError("the PPO-optimal policy needs an absolute reward")
    outcomes, p = _support(prior, x)
    scaled = reward.rewards(x, outcomes) / reward.gamma
    unnorm = p * np.exp(scaled - scaled.max())
    return DistributionTable(unnorm / unnorm.sum(), outcomes)


def kl_exact(p: DistributionTable, q: DistributionTable) -> float:
    if p.outcomes != q.outcomes:
        raise InvalidInputError("tables are indexed by different outcome lists")
    mask = p.probs > 0
    if (q.probs[mask] <= 0).any():
        raise SupportError("support(p) is not contained in support(q)")
    return max(0.0, float(np.sum(p.probs[mask] * (np.log(p.probs[mask]) - np.log(q.probs[mask])))))


def simplex_kl(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(a || b)`` for normalized log-weights; ``a_i = 0`` adds nothing."""
    a = np.exp(log_a)
    bad = (a > 0) & ~np.isfinite(log_b)
    if bad.any():
        raise SupportError("beta_hat vanishes where alpha_hat is positive")
    with np.errstate(invalid="ignore"):
        terms = np.where(a > 0, a * (log_a - log_b), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _tuple_indices(K: int, n: int, cap: int) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if K**n > cap:
        raise NotEnumerableError(f"{K}^{n} tuples exceed the cap of {cap}")
    return np.array(list(itertools.product(range(K), repeat=n)), dtype=np.intp).reshape(-1, n)


def snkl_exact(posterior: DistributionTable, q_theta: Policy, q_prime: Policy, x: int, n: int,
               cap: int = DEFAULT_TUPLE_CAP) -> float:
    """Self-normalized KL ``E_{y_1..n ~ q'} KL(alpha_hat || beta_hat)`` by enumeration."""
    outcomes, qp = _support(q_prime, x)
    with np.errstate(divide="ignore"):
        log_qp = np.log(qp)
    post = posterior.as_dict()
    if set(post) - set(outcomes):
        raise SupportError("posterior has outcomes outside the proposal's support")
    post_probs = np.array([post.get(y, 0.0) for y in outcomes])
    log_qt = q_theta.log_probs(x, outcomes)
    if ((post_probs > 0) & ~(log_qt > -np.inf)).any():
        raise SupportError("support(posterior) is not contained in support(q_theta)")
    if ((np.exp(log_qt) > 0) & ~(qp > 0)).any():
        raise SupportError("support(q_theta) is not contained in support(q')")

    idx = _tuple_indices(len(outcomes), n, cap)
    live = qp > 0
    with np.errstate(divide="ignore"):
        log_alpha = np.where(live, np.log(post_probs) - log_qp, -np.inf)
    log_beta = np.where(live, log_qt - log_qp, -np.inf)
    weight = np.exp(log_qp[idx].sum(axis=1))
    keep = weight > 0
    la = log_softmax(log_alpha[idx[keep]], axis=1)
    lb = log_softmax(log_beta[idx[keep]], axis=1)
    return float(weight[keep] @ simplex_kl(la, lb))


class MCEstimate(NamedTuple):
    estimate: float
    stderr: float
    batches: int


def snkl_mc(prior: Policy, reward: RewardModel, q_theta: Policy, q_prime: Policy, x: int, n: int,
            batches: int, rng: np.random.Generator) -> MCEstimate:
    """Monte-Carlo estimate of the self-normalized KL from ``batches`` sampled n-tuples."""
    if n < 1 or batches < 1:
        raise InvalidInputError("n and batches must be >= 1")
    # one flat draw, reshaped to (batches, n); rows are independent n-tuples
    ys = q_prime.sample(x, batches * n, rng)
    log_qp = q_prime.log_probs(x, ys)
    la = log_softmax((reward.goodness_logs(x, ys) + prior.log_probs(x, ys) - log_qp).reshape(batches, n), axis=1)
    lb = log_softmax((q_theta.log_probs(x, ys) - log_qp).reshape(batches, n), axis=1)
    values = simplex_kl(la, lb)
    stderr = float(values.std(ddof=1) / np.sqrt(batches)) if batches > 1 else float("nan")
    return MCEstimate(float(values.mean()), stderr, batches)
