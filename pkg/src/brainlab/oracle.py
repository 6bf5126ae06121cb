"""Brute-force oracles: tuple enumeration, finite differences, variance study."""

from __future__ import annotations

import itertools
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .divergences import DEFAULT_TUPLE_CAP, log_evidence
from .errors import InvalidInputError, NotEnumerableError
from .estimators import brain_gradient, estimate, gdc_gradient, gdcpp_gradient, make_batch
from .policies import GaussianPolicy, Policy
from .rewards import RewardModel, gaussian_target_goodness


@dataclass(frozen=True)
class Task:
    """Prior and reward model over a fixed prompt set."""

    prior: Policy
    reward: RewardModel
    prompts: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class TupleEnumeration:
    tuples: list[tuple]
    weights: np.ndarray


def enumerate_tuples(q_prime: Policy, x: int, n: int, cap: int = DEFAULT_TUPLE_CAP) -> TupleEnumeration:
    """Every ordered n-tuple of the proposal's support with weight ``prod q'(y_i)``."""
    support = q_prime.enumerate_support(x)
    if len(support) ** n > cap:
        raise NotEnumerableError(f"{len(support)}^{n} tuples exceed the cap of {cap}")
    tuples, weights = [], []
    for combo in itertools.product(support, repeat=n):
        tuples.append(tuple(y for y, _ in combo))
        weights.append(float(np.prod([p for _, p in combo])))
    return TupleEnumeration(tuples, np.array(weights))


def expected_estimator_gradient(estimator: str, task: Task, x: int, q_theta: Policy, q_prime: Policy,
                                n: int, Z: float | str | None = None,
                                cap: int = DEFAULT_TUPLE_CAP) -> np.ndarray:
    """Exact expectation of a stochastic estimator over ``y_1..n ~ q'``.

    ``Z="exact"`` hands GDC/GDC++ the enumerated normalizer of the target.
    """
    if Z == "exact":
        Z = float(np.exp(log_evidence(task.prior, task.reward, x)))
    enum = enumerate_tuples(q_prime, x, n, cap)
    total = np.zeros(q_theta.dim)
    for ys, w in zip(enum.tuples, enum.weights):
        batch = make_batch(x, ys, task.prior, q_prime, task.reward)
        total += w * estimate(estimator, batch, q_theta, task.prior, Z)
    return total


def finite_difference_grad(scalar_fn: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if not step > 0:
        raise InvalidInputError("step must be positive")
    params = np.array(params, dtype=np.float64).reshape(-1)
    grad = np.empty_like(params)
    for i in range(params.size):
        up, down = params.copy(), params.copy()
        up[i] += step
        down[i] -= step
        f_up, f_down = float(scalar_fn(up)), float(scalar_fn(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise InvalidInputError(f"non-finite function value near coordinate {i}")
        grad[i] = (f_up - f_down) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class VarianceRow:
    theta: float
    var_gdc: float
    var_gdcpp: float
    var_brain: float


DEFAULT_THETA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def variance_experiment(theta_grid: Sequence[float] = DEFAULT_THETA_GRID, n: int = 8,
                        repetitions: int = 2000, seed: int = 0, policy_mean: float = 1.0,
                        target_mean: float = 0.0,
                        batch_seeds: Sequence[int] | None = None) -> list[VarianceRow]:
    """Gradient variance of GDC, GDC++ and BRAIn on the 1-D Gaussian toy.

    Target ``N(target_mean, 1)`` (so ``Z = 1``), policy ``N(policy_mean, 1)``
    and proposal ``N(theta, 1)`` for every ``theta`` in the grid. The prior is
    the policy's initial distribution and the goodness model turns it into the
    target. ``batch_seeds`` overrides the per-repetition seeds.
    """
    if repetitions < 2:
        raise InvalidInputError("repetitions must be >= 2")
    if batch_seeds is not None and len(batch_seeds) != repetitions:
        raise InvalidInputError("need one batch seed per repetition")
    q_theta = GaussianPolicy(policy_mean)
    prior = q_theta
    goodness = gaussian_target_goodness(prior_mean=policy_mean, target_mean=target_mean)
    root = np.random.SeedSequence(seed)
    rows = []
    for theta, grid_seq in zip(theta_grid, root.spawn(len(theta_grid))):
        proposal = GaussianPolicy(float(theta))
        if batch_seeds is None:
            rngs = [np.random.default_rng(s) for s in grid_seq.spawn(repetitions)]
        else:
            rngs = [np.random.default_rng(s) for s in batch_seeds]
        grads = np.empty((repetitions, 3))
        for r, rng in enumerate(rngs):
            batch = make_batch(0, proposal.sample(0, n, rng), prior, proposal, goodness)
            grads[r, 0] = gdc_gradient(batch, q_theta, Z=1.0).grad[0]
            grads[r, 1] = gdcpp_gradient(batch, q_theta, Z=1.0).grad[0]
            grads[r, 2] = brain_gradient(batch, q_theta).grad[0]
        var = grads.var(axis=0, ddof=1)
        rows.append(VarianceRow(float(theta), float(var[0]), float(var[1]), float(var[2])))
    return rows
