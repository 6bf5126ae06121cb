import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from brainlab.divergences import exact_posterior, snkl_exact
from brainlab.errors import InvalidInputError
from brainlab.estimators import (
    ESTIMATORS,
    SampleBatch,
    alpha_hat_argmax,
    alpha_hat_bt,
    alpha_hat_general,
    beta_hat,
    brain_gradient,
    brain_gradient_ablated,
    dpo_gradient,
    dpo_loss,
    dpo_sft_iw_gradient,
    estimate,
    gdc_gradient,
    gdcpp_gradient,
    make_batch,
    pairs,
)
from brainlab.oracle import Task, finite_difference_grad
from brainlab.policies import CategoricalPolicy
from brainlab.rewards import GoodnessModel, TableReward

from conftest import random_categorical_task


def vectors(n_min=1, n_max=8, lo=-50.0, hi=50.0):
    return st.integers(n_min, n_max).flatmap(
        lambda n: arrays(np.float64, n, elements=st.floats(lo, hi, allow_nan=False)))


def posterior_policy(task: Task, x=0) -> CategoricalPolicy:
    post = exact_posterior(task.prior, task.reward, x)
    logits = task.prior.logits.copy()
    logits[x] = np.log(post.probs)
    return CategoricalPolicy(logits)


def batch_for(task, ys, proposal=None, x=0):
    return make_batch(x, list(ys), task.prior, proposal or task.prior, task.reward)


# alpha_hat / beta_hat

def test_alpha_general_proposal_equals_prior():
    lp = np.log([0.1, 0.5, 0.4])
    a = alpha_hat_general(lp, lp, np.log([0.2, 0.2, 0.6]))
    np.testing.assert_allclose(a, [0.2, 0.2, 0.6], atol=1e-15)
    assert alpha_hat_general([0.3], [-1.0], [2.0]).tolist() == [1.0]


def test_alpha_bt_high_precision_example():
    mp = [mpmath.e / (mpmath.e + 1), 1 / (mpmath.e + 1)]
    a = alpha_hat_bt([1.0, 0.0], 1.0, [0.0, 0.0], [0.0, 0.0])
    np.testing.assert_allclose(a, [float(v) for v in mp], atol=1e-16)
    np.testing.assert_allclose(a, [0.731059, 0.268941], atol=1e-6)


def test_alpha_bt_equal_rewards_and_cold_limit():
    lp = np.log([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(alpha_hat_bt([3.0] * 4, 1.0, lp, lp), [0.25] * 4, atol=1e-15)
    np.testing.assert_allclose(alpha_hat_bt([1.0, 0.0], 1e-4, [0, 0], [0, 0]), [1.0, 0.0], atol=1e-300)
    np.testing.assert_array_equal(alpha_hat_argmax([1.0, 0.0]), [1.0, 0.0])
    np.testing.assert_array_equal(alpha_hat_argmax([2.0, 2.0, 1.0]), [1.0, 0.0, 0.0])


def test_weight_input_errors():
    with pytest.raises(InvalidInputError):
        alpha_hat_bt([1.0], 0.0, [0.0], [0.0])
    with pytest.raises(InvalidInputError):
        alpha_hat_general([np.nan], [0.0], [0.0])
    with pytest.raises(InvalidInputError):
        beta_hat([np.inf, 0.0], [0.0, 0.0])
    with pytest.raises(InvalidInputError):
        alpha_hat_general([0.0, 1.0], [0.0], [0.0, 0.0])


def test_beta_examples():
    lq = np.log([0.3, 0.1, 0.6])
    np.testing.assert_allclose(beta_hat(lq, lq), [1 / 3] * 3, atol=1e-15)
    assert beta_hat([4.0], [-2.0]).tolist() == [1.0]
    np.testing.assert_allclose(beta_hat(lq + 9.0, np.zeros(3)), beta_hat(lq, np.zeros(3)), atol=1e-15)


@given(vectors(), st.floats(-1e3, 1e3), st.floats(0.01, 100))
def test_alpha_simplex_and_invariances(r, shift, gamma):
    lp = np.linspace(-3, 0, r.size)
    lq = np.linspace(0, -2, r.size)
    a = alpha_hat_bt(r, gamma, lp, lq)
    assert (a >= 0).all() and abs(a.sum() - 1) < 1e-10
    np.testing.assert_allclose(alpha_hat_bt(r + shift, gamma, lp, lq), a, atol=1e-9)
    # scaling the goodness model by c > 0 shifts every goodness_log by log c
    np.testing.assert_allclose(alpha_hat_general(lp, lq, r / gamma + np.log(7.5)), a, atol=1e-9)


@given(vectors())
def test_prior_proposal_gives_reward_softmax(r):
    lp = np.zeros(r.size) - 1.3
    expected = np.exp(r - r.max())
    expected /= expected.sum()
    np.testing.assert_allclose(alpha_hat_bt(r, 1.0, lp, lp), expected, atol=1e-12)


@given(vectors(lo=-30, hi=30), st.floats(-5, 5))
def test_beta_simplex(lq, shift):
    b = beta_hat(lq, np.zeros(lq.size) + shift)
    assert (b >= 0).all() and abs(b.sum() - 1) < 1e-10


# brain_gradient

def test_brain_zero_at_posterior_on_every_tuple(rng):
    task = random_categorical_task(rng, V=3, reward_scale=2.0)
    post = posterior_policy(task)
    proposal = CategoricalPolicy(rng.normal(size=(1, 3)))
    for ys in itertools.product(range(3), repeat=3):
        batch = batch_for(task, ys, proposal)
        g = brain_gradient(batch, post)
        np.testing.assert_allclose(g.weights, 0.0, atol=1e-15)
        np.testing.assert_allclose(g.grad, 0.0, atol=1e-15)


def test_brain_n1_is_zero(rng):
    task = random_categorical_task(rng, V=4)
    batch = batch_for(task, [2])
    assert not brain_gradient(batch, CategoricalPolicy(rng.normal(size=(1, 4)))).grad.any()


@given(st.lists(st.integers(0, 3), min_size=1, max_size=6), st.integers(0, 1000))
def test_brain_weights_are_a_contrast(ys, seed):
    rng = np.random.default_rng(seed)
    task = random_categorical_task(rng, V=4, reward_scale=5.0)
    q = CategoricalPolicy(rng.normal(size=(1, 4)))
    g = brain_gradient(batch_for(task, ys, CategoricalPolicy(rng.normal(size=(1, 4)))), q)
    assert abs(g.weights.sum()) < 1e-12
    assert np.isfinite(g.grad).all()


def test_brain_expectation_matches_snkl_gradient_small(rng):
    task = random_categorical_task(rng, V=3)
    q_prime = CategoricalPolicy(rng.normal(size=(1, 3)))
    q_theta = CategoricalPolicy(rng.normal(size=(1, 3)))
    post = exact_posterior(task.prior, task.reward, 0)
    expected = np.zeros(3)
    for ys in itertools.product(range(3), repeat=2):
        w = np.prod([q_prime.probs(0)[y] for y in ys])
        expected += w * brain_gradient(batch_for(task, ys, q_prime), q_theta).grad
    fd = finite_difference_grad(lambda p: snkl_exact(post, q_theta.with_params(p), q_prime, 0, 2), q_theta.params)
    np.testing.assert_allclose(expected, -fd, atol=1e-8)


# ablations

def test_no_baseline_single_weight_is_score(rng):
    q = CategoricalPolicy(rng.normal(size=(1, 3)))
    batch = SampleBatch(0, [1, 2], np.zeros(2), np.zeros(2), np.zeros(2), np.array([0.0, 1.0]))
    np.testing.assert_allclose(brain_gradient_ablated(batch, q, "no_baseline").grad, q.grad_log_prob(0, 2))


def test_no_baseline_nonzero_at_posterior(rng):
    prior = CategoricalPolicy.uniform(1, 3)
    task = Task(prior, TableReward([[1.5, 0.0, -1.0]]))
    post = posterior_policy(task)
    batch = batch_for(task, [0, 1, 1, 2])
    assert np.abs(brain_gradient(batch, post).grad).max() < 1e-15
    assert np.abs(brain_gradient_ablated(batch, post, "no_baseline").grad).max() > 0.05


def test_no_selfnorm_equals_brain_when_ratios_sum_to_n(rng):
    # q_theta == q' on the batch gives beta_i = 1, so sum beta = n
    task = random_categorical_task(rng, V=3)
    q = CategoricalPolicy(rng.normal(size=(1, 3)))
    batch = batch_for(task, [0, 2, 2], q)
    np.testing.assert_allclose(brain_gradient_ablated(batch, q, "no_selfnorm").grad,
                               brain_gradient(batch, q).grad, atol=1e-15)
    with pytest.raises(InvalidInputError):
        brain_gradient_ablated(batch, q, "nope")


# GDC / GDC++

def test_gdc_with_sample_mean_z_is_no_baseline(rng):
    task = random_categorical_task(rng, V=4)
    q_prime = CategoricalPolicy(rng.normal(size=(1, 4)))
    q = CategoricalPolicy(rng.normal(size=(1, 4)))
    batch = batch_for(task, [0, 3, 1, 3, 2], q_prime)
    z_hat = float(np.mean(np.exp(batch.log_alpha())))
    for Z in (None, z_hat):
        np.testing.assert_allclose(gdc_gradient(batch, q, Z).grad,
                                   brain_gradient_ablated(batch, q, "no_baseline").grad, atol=1e-14)


def test_gdc_single_sample_at_z_is_score(rng):
    q = CategoricalPolicy(rng.normal(size=(1, 3)))
    batch = SampleBatch(0, [1], np.array([-1.0]), np.array([-0.5]), np.array([0.2]), np.array([1.0]))
    Z = float(np.exp(batch.log_alpha()[0]))
    np.testing.assert_allclose(gdc_gradient(batch, q, Z).grad, q.grad_log_prob(0, 1), atol=1e-15)
    with pytest.raises(InvalidInputError):
        gdc_gradient(batch, q, 0.0)


def test_gdc_gaussian_weights_are_density_ratios():
    from scipy import stats
    from brainlab.policies import GaussianPolicy
    from brainlab.rewards import gaussian_target_goodness
    prior = GaussianPolicy(1.0)
    proposal = GaussianPolicy(0.3)
    ys = [-0.4, 0.1, 1.7]
    batch = make_batch(0, ys, prior, proposal, gaussian_target_goodness(1.0))
    ratio = stats.norm.pdf(ys, 0, 1) / stats.norm.pdf(ys, 0.3, 1)
    np.testing.assert_allclose(np.exp(batch.log_alpha()), ratio, rtol=1e-12)
    np.testing.assert_allclose(gdc_gradient(batch, prior, 1.0).weights, ratio / 3, rtol=1e-12)


def test_gdcpp_at_posterior(rng):
    task = random_categorical_task(rng, V=3, reward_scale=1.5)
    post = posterior_policy(task)
    Z = float(np.exp(np.log(np.sum(np.exp(task.prior.logits[0] + task.reward.table[0]))) -
                     np.log(np.sum(np.exp(task.prior.logits[0])))))
    q_prime = CategoricalPolicy(rng.normal(size=(1, 3)))
    nonzero = 0
    for ys in itertools.product(range(3), repeat=2):
        batch = batch_for(task, ys, q_prime)
        np.testing.assert_allclose(gdcpp_gradient(batch, post, Z).grad, 0.0, atol=1e-14)
        nonzero += np.abs(gdcpp_gradient(batch, post).grad).max() > 1e-6
    assert nonzero > 0


def test_gdcpp_reduces_to_gdc_when_policy_vanishes(rng):
    task = random_categorical_task(rng, V=3)
    logits = np.array([[-800.0, -800.0, 0.0]])
    q = CategoricalPolicy(logits)
    batch = batch_for(task, [0, 1, 0])
    np.testing.assert_allclose(gdcpp_gradient(batch, q, 1.3).grad, gdc_gradient(batch, q, 1.3).grad, atol=1e-300)


# DPO

def test_dpo_equal_implicit_rewards(rng):
    prior = CategoricalPolicy(rng.normal(size=(1, 4)))
    for beta in (0.5, 1.0, 3.0):
        g = dpo_gradient(0, 1, 3, prior, prior, beta)
        expected = beta / 2 * (prior.grad_log_prob(0, 1) - prior.grad_log_prob(0, 3))
        np.testing.assert_allclose(g.grad, expected, atol=1e-15)


def test_dpo_matches_finite_differences(rng):
    prior = CategoricalPolicy(rng.normal(size=(2, 4)))
    q = CategoricalPolicy(rng.normal(size=(2, 4)))
    for beta in (0.3, 1.0, 2.5):
        fd = finite_difference_grad(lambda p: -dpo_loss(1, 0, 2, q.with_params(p), prior, beta), q.params)
        np.testing.assert_allclose(dpo_gradient(1, 0, 2, q, prior, beta).grad, fd, rtol=1e-6, atol=1e-9)


def test_dpo_errors(rng):
    p = CategoricalPolicy.uniform(1, 3)
    with pytest.raises(InvalidInputError):
        dpo_gradient(0, 1, 1, p, p)
    with pytest.raises(InvalidInputError):
        dpo_gradient(0, 1, 2, p, p, beta=0.0)


def _argmax_pair_batch(task, ys):
    batch = batch_for(task, ys)
    return batch.subset(range(2), alpha_hat=alpha_hat_argmax(batch.r))


def test_dpo_is_argmax_brain_with_prior_proposal(rng):
    for _ in range(50):
        task = random_categorical_task(rng, V=4, reward_scale=2.0)
        q = CategoricalPolicy(rng.normal(size=(1, 4)))
        ys = rng.choice(4, 2, replace=False).tolist()
        batch = _argmax_pair_batch(task, ys)
        w, l = (ys[0], ys[1]) if batch.r[0] >= batch.r[1] else (ys[1], ys[0])
        np.testing.assert_allclose(brain_gradient(batch, q).grad, dpo_gradient(0, w, l, q, task.prior).grad,
                                   atol=1e-12)
        np.testing.assert_allclose(dpo_sft_iw_gradient(batch, q).grad, dpo_gradient(0, w, l, q, task.prior).grad,
                                   atol=1e-12)


def test_dpo_sft_iw_equal_rewards_uniform_weights(rng):
    prior = CategoricalPolicy(rng.normal(size=(1, 3)))
    task = Task(prior, TableReward([[0.7, 0.7, 0.7]]))
    q = CategoricalPolicy(rng.normal(size=(1, 3)))
    batch = batch_for(task, [0, 2])
    np.testing.assert_allclose(batch.alpha_hat, [0.5, 0.5])
    b = beta_hat(q.log_probs(0, [0, 2]), batch.log_q_prime)
    expected = (0.5 - b) @ q.scores(0, [0, 2])
    g = dpo_sft_iw_gradient(batch, q)
    assert g.estimator == "dpo_sft_iw"
    np.testing.assert_allclose(g.grad, expected, atol=1e-15)


def test_dpo_sft_iw_n_is_brain_with_prior_proposal(rng):
    task = random_categorical_task(rng, V=5, reward_scale=3.0)
    q = CategoricalPolicy(rng.normal(size=(1, 5)))
    batch = batch_for(task, [0, 4, 2, 2, 1, 3])
    g = dpo_sft_iw_gradient(batch, q)
    assert g.estimator == "dpo_sft_iw_n"
    np.testing.assert_array_equal(g.grad, brain_gradient(batch, q).grad)
    with pytest.raises(InvalidInputError):
        dpo_sft_iw_gradient(batch_for(task, [0, 1], CategoricalPolicy.uniform(1, 5)), q)


def test_pairwise_estimate_averages_explicit_pairs(rng):
    task = random_categorical_task(rng, V=4, reward_scale=2.0, gamma=0.7)
    q = CategoricalPolicy(rng.normal(size=(1, 4)))
    ys = [0, 3, 1, 1, 2, 0, 3, 2]
    batch = batch_for(task, ys)
    assert pairs(8) == [(0, 1), (2, 3), (4, 5), (6, 7)]
    dpo_ref, iw_ref, used = np.zeros(4), np.zeros(4), 0
    for i, j in pairs(8):
        sub = batch.subset([i, j])
        iw_ref += dpo_sft_iw_gradient(sub, q).grad
        if ys[i] != ys[j]:
            w, l = (ys[i], ys[j]) if batch.r[i] >= batch.r[j] else (ys[j], ys[i])
            dpo_ref += dpo_gradient(0, w, l, q, task.prior, beta=0.7).grad
    np.testing.assert_allclose(estimate("dpo", batch, q, task.prior), dpo_ref / 4, atol=1e-14)
    np.testing.assert_allclose(estimate("dpo_sft_iw", batch, q, task.prior), iw_ref / 4, atol=1e-14)


def test_estimate_dispatch(rng):
    task = random_categorical_task(rng, V=3)
    q = CategoricalPolicy(rng.normal(size=(1, 3)))
    batch = batch_for(task, [0, 1, 2, 1])
    for tag in ESTIMATORS:
        g = estimate(tag, batch, q, task.prior, 1.0)
        assert g.shape == (3,) and np.isfinite(g).all()
    with pytest.raises(InvalidInputError):
        estimate("ppo", batch, q)
    with pytest.raises(InvalidInputError):
        estimate("dpo", batch, q)
    with pytest.raises(InvalidInputError):
        estimate("dpo", batch.subset([0]), q, task.prior)


def test_goodness_only_batches(rng):
    prior = CategoricalPolicy(rng.normal(size=(1, 3)))
    model = GoodnessModel(lambda x, y: [0.0, -1.0, 0.5][y])
    batch = make_batch(0, [0, 1, 2], prior, prior, model)
    np.testing.assert_allclose(batch.alpha_hat, np.exp([0.0, -1.0, 0.5]) / np.exp([0.0, -1.0, 0.5]).sum())


def test_sample_batch_validation():
    with pytest.raises(InvalidInputError):
        SampleBatch(0, [], np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    with pytest.raises(InvalidInputError):
        SampleBatch(0, [0, 1], np.zeros(2), np.zeros(2), np.zeros(2), np.array([0.7, 0.7]))
    with pytest.raises(InvalidInputError):
        SampleBatch(0, [0, 1], np.zeros(3), np.zeros(2), np.zeros(2), np.array([0.5, 0.5]))
