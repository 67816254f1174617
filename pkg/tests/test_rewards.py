import math

import numpy as np
import pytest

from rlsft.domain import Vocab
from rlsft.oracle import fd_gradient
from rlsft.policies import DomainError, TabularPolicy, TabularSupport
from rlsft.rewards import (FeaturizedReward, TabularReward, check_beta, implicit_reward,
                           induced_policy, reward_grad, reward_value)


def support3():
    return TabularSupport.single_prompt(Vocab(3), [(0,), (1,), (2,)])


def test_zero_params_give_zero(two_prompt_support):
    r = TabularReward(two_prompt_support)
    f = FeaturizedReward(Vocab(4))
    for x, row in zip(two_prompt_support.prompts, two_prompt_support.continuations):
        for y in row:
            assert reward_value(r, x, y) == 0.0
            assert reward_value(f, x, y) == 0.0


def test_tabular_value_and_grad():
    r = TabularReward(support3(), [0.0, 0.0, 1.0], clamp=1.0)
    assert reward_value(r, (), (2,)) == 1.0
    assert np.array_equal(reward_grad(r, (), (1,)), [0.0, 1.0, 0.0])
    with pytest.raises(DomainError):
        r.value((), (0, 0))


def test_featurized_repeated_bigram_counts_twice():
    vocab = Vocab(3)
    f = FeaturizedReward(vocab)
    w = np.zeros(f.n_params)
    w[f.bigram_index(0, 1)] = 1.0
    f = f.with_params(w)
    assert reward_value(f, (2,), (0, 1, 0, 1)) == 2.0


def test_featurized_grad_is_feature_vector():
    vocab = Vocab(3)
    f = FeaturizedReward(vocab)
    g = reward_grad(f, (), (0, 1))
    expect = np.zeros(f.n_params)
    expect[f.bigram_index(3, 0)] = 1.0          # begin marker -> 0
    expect[f.bigram_index(0, 1)] = 1.0
    expect[-1] = 2.0                           # length feature
    assert np.array_equal(g, expect)
    # the first token pairs with the last prompt token
    assert reward_grad(f, (2, 1), (0,))[f.bigram_index(1, 0)] == 1.0


def test_reward_fd_is_near_exact(two_prompt_support):
    gen = np.random.default_rng(4)
    r = TabularReward(two_prompt_support, gen.standard_normal(two_prompt_support.size))
    f = FeaturizedReward(Vocab(4), gen.standard_normal(FeaturizedReward(Vocab(4)).n_params))
    for model in (r, f):
        for x, y in [((0,), (2,)), ((1,), (0, 1))]:
            fd = fd_gradient(lambda th: model.with_params(th).value(x, y), model.params, 1e-5)
            assert np.max(np.abs(fd - model.grad(x, y))) < 1e-8
            # gradient does not depend on params (linear model)
            other = model.with_params(gen.standard_normal(model.n_params))
            assert np.array_equal(other.grad(x, y), model.grad(x, y))


def test_projection_clips_to_box():
    r = TabularReward(support3(), [-0.5, 0.3, 2.0], clamp=1.0)
    assert np.array_equal(r.project().params, [0.0, 0.3, 1.0])
    with pytest.raises(ValueError):
        TabularReward(support3(), clamp=0.0)


def test_zero_reward_induces_ref(random_policy):
    r = TabularReward(random_policy.support)
    pi = induced_policy(r, random_policy, 0.7)
    assert np.array_equal(pi.log_prob_table(), random_policy.log_prob_table())


def test_ratio_one_to_three():
    sup = TabularSupport.single_prompt(Vocab(2), [(0,), (1,)])
    beta = 0.4
    r = TabularReward(sup, [0.0, beta * math.log(3)])
    pi = induced_policy(r, TabularPolicy(sup), beta)
    assert np.allclose(pi.row_probs(0), [0.25, 0.75], atol=1e-12)


def test_example1_normalized_solution():
    sup = support3()
    pi = induced_policy(TabularReward(sup, [0.0, 0.0, 1.0]), TabularPolicy(sup), 1.0)
    e = math.e
    assert np.allclose(pi.row_probs(0), [1 / (2 + e), 1 / (2 + e), e / (2 + e)], atol=1e-12)
    assert np.allclose(pi.row_probs(0), [0.21194, 0.21194, 0.57612], atol=5e-6)


def test_induced_rows_normalize_and_large_beta_limit(random_policy):
    gen = np.random.default_rng(1)
    r = TabularReward(random_policy.support, gen.standard_normal(random_policy.support.size))
    pi = induced_policy(r, random_policy, 0.3)
    for i in range(pi.support.n_prompts):
        assert abs(pi.row_probs(i).sum() - 1) < 1e-12
    far = induced_policy(r, random_policy, 1e6)
    for i in range(pi.support.n_prompts):
        assert 0.5 * np.abs(far.row_probs(i) - random_policy.row_probs(i)).sum() < 1e-5


def test_induced_policy_rejects_mismatched_support(random_policy):
    with pytest.raises(DomainError):
        induced_policy(TabularReward(support3()), random_policy, 1.0)


def test_featurized_reward_induces_policy(random_policy):
    gen = np.random.default_rng(2)
    f = FeaturizedReward(Vocab(4))
    f = f.with_params(gen.standard_normal(f.n_params))
    pi = induced_policy(f, random_policy, 1.0)
    x, y1, y2 = (1,), (0, 1), (2,)
    diff = implicit_reward(pi, random_policy, 1.0, x, y1) - implicit_reward(pi, random_policy, 1.0, x, y2)
    assert diff == pytest.approx(f.value(x, y1) - f.value(x, y2), abs=1e-10)


def test_implicit_reward_basics(random_policy):
    assert implicit_reward(random_policy, random_policy, 3.0, (0,), (2,)) == 0.0
    sup = support3()
    pol = TabularPolicy(sup, [0.5, 0.0, 0.0])
    ref = TabularPolicy(sup)
    lr = pol.log_prob((), (0,)) - ref.log_prob((), (0,))
    assert implicit_reward(pol, ref, 2.0, (), (0,)) == pytest.approx(2.0 * lr)


def test_beta_two_log_ratio_half():
    sup = TabularSupport.single_prompt(Vocab(2), [(0,), (1,)])
    ref = TabularPolicy(sup)
    # choose logits so log pi(y0) - log ref(y0) = 0.5
    target = math.exp(0.5) * 0.5
    pol = TabularPolicy(sup, [math.log(target), math.log(1 - target)])
    assert implicit_reward(pol, ref, 2.0, (), (0,)) == pytest.approx(1.0, abs=1e-12)


def test_reward_policy_duality(random_policy):
    gen = np.random.default_rng(6)
    sup = random_policy.support
    for beta in (0.1, 1.0, 7.0):
        r = TabularReward(sup, gen.standard_normal(sup.size) * 3)
        pi = induced_policy(r, random_policy, beta)
        for x, row in zip(sup.prompts, sup.continuations):
            for a in row:
                for b in row:
                    d = implicit_reward(pi, random_policy, beta, x, a) - implicit_reward(
                        pi, random_policy, beta, x, b)
                    assert d == pytest.approx(r.value(x, a) - r.value(x, b), abs=1e-10)


def test_check_beta():
    for bad in (0, -1, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            check_beta(bad)
    assert check_beta(2) == 2.0
