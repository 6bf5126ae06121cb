"""Importance weights and policy-gradient estimators.

All estimators return the gradient of the objective to be *maximized*
(the negative divergence); the trainer ascends.

Weights come in two flavours:

* ``alpha_hat`` -- self-normalized importance weights of the posterior
  against the proposal. Frozen when a batch is generated.
* ``beta_hat`` -- self-normalized weights of the live policy against the
  proposal. Recomputed from ``q_theta`` on every call.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

from .errors import InvalidInputError
from .policies import Policy
from .rewards import RewardModel

ESTIMATORS = (
    "brain",
    "brain_no_selfnorm",
    "brain_no_baseline",
    "gdc",
    "gdcpp",
    "dpo",
    "dpo_sft_iw",
    "dpo_sft_iw_n",
)
PAIRWISE = ("dpo", "dpo_sft_iw")


def _vec(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _same_length(*arrays):
    if len({a.size for a in arrays}) != 1:
        raise InvalidInputError("weight inputs must have equal lengths")


def alpha_hat_general(log_p, log_q_prime, goodness_log) -> np.ndarray:
    """``softmax_i(goodness_log_i + log_p_i - log_q'_i)``."""
    log_p = _vec(log_p, "log_p")
    log_q_prime = _vec(log_q_prime, "log_q_prime")
    goodness_log = _vec(goodness_log, "goodness_log")
    _same_length(log_p, log_q_prime, goodness_log)
    return softmax(goodness_log + log_p - log_q_prime)


def alpha_hat_bt(rewards, gamma: float, log_p, log_q_prime) -> np.ndarray:
    """Bradley-Terry weights ``softmax_i(r_i/gamma + log_p_i - log_q'_i)``.

    With the proposal equal to the prior this is ``softmax(r/gamma)``.
    """
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    rewards = _vec(rewards, "rewards")
    return alpha_hat_general(log_p, log_q_prime, rewards / gamma)


def alpha_hat_argmax(rewards) -> np.ndarray:
    """One-hot weight on the highest reward; ties go to the lowest index."""
    rewards = _vec(rewards, "rewards")
    out = np.zeros(rewards.size)
    out[int(np.argmax(rewards))] = 1.0
    return out


def beta_hat(log_q_theta, log_q_prime) -> np.ndarray:
    """``softmax_i(log q_theta_i - log q'_i)``."""
    log_q_theta = _vec(log_q_theta, "log_q_theta")
    log_q_prime = _vec(log_q_prime, "log_q_prime")
    _same_length(log_q_theta, log_q_prime)
    return softmax(log_q_theta - log_q_prime)


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """``n`` outcomes for one prompt with generation-time caches.

    ``r`` holds rewards for reward models, or goodness log-values (with
    ``gamma = 1``) for goodness-only models.
    """

    x: int
    outcomes: tuple
    log_q_prime: np.ndarray
    log_p: np.ndarray
    r: np.ndarray
    alpha_hat: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        n = len(self.outcomes)
        if n < 1:
            raise InvalidInputError("a batch needs at least one outcome")
        for name in ("log_q_prime", "log_p", "r", "alpha_hat"):
            arr = _vec(getattr(self, name), name)
            if arr.size != n:
                raise InvalidInputError(f"{name} has length {arr.size}, expected {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if (self.alpha_hat < 0).any() or abs(self.alpha_hat.sum() - 1.0) > 1e-10:
            raise InvalidInputError("alpha_hat must lie on the probability simplex")

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def goodness_log(self) -> np.ndarray:
        return self.r / self.gamma

    def log_alpha(self) -> np.ndarray:
        """Unnormalized ``log alpha_i`` (evidence dropped)."""
        return self.goodness_log + self.log_p - self.log_q_prime

    def subset(self, idx: Sequence[int], alpha_hat=None) -> "SampleBatch":
        """Sub-batch over ``idx``; ``alpha_hat`` is renormalized unless given."""
        idx = list(idx)
        if alpha_hat is None:
            alpha_hat = alpha_hat_general(self.log_p[idx], self.log_q_prime[idx], self.goodness_log[idx])
        return SampleBatch(self.x, [self.outcomes[i] for i in idx], self.log_q_prime[idx],
                           self.log_p[idx], self.r[idx], alpha_hat, self.gamma)


def make_batch(x: int, outcomes: Sequence, prior: Policy, proposal: Policy,
               reward: RewardModel) -> SampleBatch:
    """Cache ``log q'``, ``log p``, rewards and ``alpha_hat`` for fresh samples."""
    log_q_prime = proposal.log_probs(x, outcomes)
    log_p = log_q_prime if proposal is prior else prior.log_probs(x, outcomes)
    if reward.has_reward:
        r = reward.rewards(x, outcomes)
        alpha = alpha_hat_bt(r, reward.gamma, log_p, log_q_prime)
        return SampleBatch(x, outcomes, log_q_prime, log_p, r, alpha, reward.gamma)
    g = reward.goodness_logs(x, outcomes)
    return SampleBatch(x, outcomes, log_q_prime, log_p, g, alpha_hat_general(log_p, log_q_prime, g), 1.0)


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    grad: np.ndarray
    estimator: str
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator tag {self.estimator!r}")
        if not np.isfinite(self.grad).all():
            raise InvalidInputError(f"{self.estimator} gradient is not finite")


def _contrast(batch: SampleBatch, q_theta: Policy, weights: np.ndarray, tag: str) -> GradientEstimate:
    return GradientEstimate(weights @ q_theta.scores(batch.x, batch.outcomes), tag, weights)


def brain_gradient(batch: SampleBatch, q_theta: Policy) -> GradientEstimate:
    """``sum_i (alpha_hat_i - beta_hat_i) * grad log q_theta(y_i|x)``."""
    b = beta_hat(q_theta.log_probs(batch.x, batch.outcomes), batch.log_q_prime)
    return _contrast(batch, q_theta, batch.alpha_hat - b, "brain")


def brain_gradient_ablated(batch: SampleBatch, q_theta: Policy, mode: str) -> GradientEstimate:
    """BRAIn without the baseline, or with an unnormalized (``/n``) baseline."""
    if mode == "no_baseline":
        return _contrast(batch, q_theta, batch.alpha_hat.copy(), "brain_no_baseline")
    if mode == "no_selfnorm":
        beta = np.exp(q_theta.log_probs(batch.x, batch.outcomes) - batch.log_q_prime)
        return _contrast(batch, q_theta, batch.alpha_hat - beta / batch.n, "brain_no_selfnorm")
    raise InvalidInputError(f"unknown ablation mode {mode!r}")


def _log_z(batch: SampleBatch, Z: float | None) -> float:
    if Z is None:
        return float(logsumexp(batch.log_alpha()) - np.log(batch.n))
    if not Z > 0:
        raise InvalidInputError(f"Z must be positive, got {Z}")
    return float(np.log(Z))


def gdc_gradient(batch: SampleBatch, q_theta: Policy, Z: float | None = None) -> GradientEstimate:
    """``(1/n) sum_i (alpha_i / Z) * score_i``; ``Z`` defaults to ``mean(alpha)``."""
    w = np.exp(batch.log_alpha() - _log_z(batch, Z)) / batch.n
    return _contrast(batch, q_theta, w, "gdc")


def gdcpp_gradient(batch: SampleBatch, q_theta: Policy, Z: float | None = None) -> GradientEstimate:
    """GDC with the unnormalized ``q_theta/q'`` baseline subtracted."""
    a = np.exp(batch.log_alpha() - _log_z(batch, Z))
    b = np.exp(q_theta.log_probs(batch.x, batch.outcomes) - batch.log_q_prime)
    return _contrast(batch, q_theta, (a - b) / batch.n, "gdcpp")


def dpo_loss(x: int, winner, loser, q_theta: Policy, prior: Policy, beta: float = 1.0) -> float:
    """``-log sigmoid(beta * (h_w - h_l))`` with ``h = log q_theta - log p``."""
    h_w = q_theta.log_prob(x, winner) - prior.log_prob(x, winner)
    h_l = q_theta.log_prob(x, loser) - prior.log_prob(x, loser)
    return float(np.logaddexp(0.0, -beta * (h_w - h_l)))


def dpo_gradient(x: int, winner, loser, q_theta: Policy, prior: Policy, beta: float = 1.0) -> GradientEstimate:
    """Ascent direction of the DPO objective (negative gradient of :func:`dpo_loss`)."""
    if not beta > 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if winner == loser:
        raise InvalidInputError("DPO needs distinct winner and loser")
    lq = q_theta.log_probs(x, [winner, loser])
    lp = prior.log_probs(x, [winner, loser])
    h_w, h_l = lq - lp
    coef = float(expit(beta * (h_l - h_w))) * beta
    s = q_theta.scores(x, [winner, loser])
    return GradientEstimate(coef * (s[0] - s[1]), "dpo", np.array([coef, -coef]))


def dpo_sft_iw_gradient(batch: SampleBatch, q_theta: Policy, prior_is_proposal: bool = True) -> GradientEstimate:
    """Gradient of ``-sum_i alpha_hat_i log beta_hat_i`` for a prior-sampled batch.

    ``n == 2`` is DPO-sft+IW; larger ``n`` is DPO-sft+IW+n. Algebraically the
    same contrast as :func:`brain_gradient`.
    """
    if prior_is_proposal and not np.array_equal(batch.log_p, batch.log_q_prime):
        raise InvalidInputError("batch was not generated from the prior")
    est = brain_gradient(batch, q_theta)
    tag = "dpo_sft_iw" if batch.n == 2 else "dpo_sft_iw_n"
    return GradientEstimate(est.grad, tag, est.weights)


def pairs(n: int) -> list[tuple[int, int]]:
    """Consecutive disjoint pairs ``(0,1), (2,3), ...``; an odd tail is dropped."""
    return [(i, i + 1) for i in range(0, n - 1, 2)]


def _pairwise_weights(tag: str, batch: SampleBatch, log_q_theta: np.ndarray) -> np.ndarray:
    """Per-outcome weights of the pair-averaged DPO / DPO-sft+IW contrast."""
    pp = pairs(batch.n)
    if not pp:
        raise InvalidInputError(f"{tag} requires n >= 2")
    i, j = np.array(pp).T
    h = log_q_theta - batch.log_p
    w = np.zeros(batch.n)
    if tag == "dpo":
        distinct = np.array([batch.outcomes[a] != batch.outcomes[b] for a, b in pp])
        i, j = i[distinct], j[distinct]
        swap = batch.r[j] > batch.r[i]
        win, lose = np.where(swap, j, i), np.where(swap, i, j)
        beta = batch.gamma
        coef = beta * expit(beta * (h[lose] - h[win]))
        np.add.at(w, win, coef)
        np.add.at(w, lose, -coef)
    else:
        la = batch.log_alpha()
        lb = log_q_theta - batch.log_q_prime
        a_i = expit(la[i] - la[j])
        b_i = expit(lb[i] - lb[j])
        np.add.at(w, i, a_i - b_i)
        np.add.at(w, j, b_i - a_i)
    return w / len(pp)


def estimate(tag: str, batch: SampleBatch, q_theta: Policy, prior: Policy | None = None,
             Z: float | None = None) -> np.ndarray:
    """Per-prompt gradient for any estimator tag, as used by the trainer.

    Pairwise estimators split the batch into ``n/2`` disjoint pairs
    ``(0,1), (2,3), ...`` and average over pairs. ``dpo`` takes
    ``beta = gamma``, labels the higher-reward member of each pair the winner
    (ties to the lower index) and skips pairs whose outcomes coincide.
    """
    if tag == "brain":
        return brain_gradient(batch, q_theta).grad
    if tag == "brain_no_selfnorm":
        return brain_gradient_ablated(batch, q_theta, "no_selfnorm").grad
    if tag == "brain_no_baseline":
        return brain_gradient_ablated(batch, q_theta, "no_baseline").grad
    if tag == "gdc":
        return gdc_gradient(batch, q_theta, Z).grad
    if tag == "gdcpp":
        return gdcpp_gradient(batch, q_theta, Z).grad
    if tag == "dpo_sft_iw_n":
        return dpo_sft_iw_gradient(batch, q_theta, prior_is_proposal=False).grad
    if tag in PAIRWISE:
        if tag == "dpo" and prior is None:
            raise InvalidInputError("dpo needs the prior policy")
        w = _pairwise_weights(tag, batch, q_theta.log_probs(batch.x, batch.outcomes))
        return w @ q_theta.scores(batch.x, batch.outcomes)
    raise InvalidInputError(f"unknown estimator tag {tag!r}")
