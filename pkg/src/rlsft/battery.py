"""The registered verification battery run by ``rlsft oracle-check``.

Each check pits one analytic kernel against an independent computation
(central finite differences or full enumeration) on freshly drawn random
instances and yields :class:`~rlsft.oracle.OracleReport` rows. Kernels are
looked up in a registry so a test can swap in a corrupted one and watch the
battery name it.
"""

from __future__ import annotations

import numpy as np

from . import gradients, policies, rewards
from .domain import DemoPair, DemoSet
from .gradients import GradSample, IDENTITY, LOG_SIGMOID
from .oracle import (MAX_CONTINUATIONS, MAX_PROMPTS, OracleRefusal, TabularProblem, compare,
                     exact_stationary_points, fd_gradient, solve_example1)
from .policies import AutoregressivePolicy, TabularPolicy, make_rng
from .rewards import FeaturizedReward, TabularReward, induced_policy
from .synth import example1_demos, example1_world, random_support

DEFAULT_KERNELS = {
    "grad_log_prob": policies.grad_log_prob,
    "reward_grad": rewards.reward_grad,
    "sft_gradient": gradients.sft_gradient,
    "rft_reward_gradient": gradients.rft_reward_gradient,
    "irft_gradient": gradients.irft_gradient,
}

FD_EPS = 1e-5
FD_TOL = 1e-6
EXACT_TOL = 1e-10


def random_instance(rng, n_prompts=3, n_conts=5, vocab_size=6):
    """Random tabular support, reference, reward and demonstration set."""
    n_prompts = int(rng.integers(1, n_prompts + 1))
    n_conts = int(rng.integers(2, n_conts + 1))
    support = random_support(rng, n_prompts, n_conts, vocab_size, cont_len=2)
    ref = TabularPolicy(support, rng.standard_normal(support.size))
    reward = TabularReward(support, rng.standard_normal(support.size))
    items = []
    for _ in range(int(rng.integers(3, 9))):
        i = int(rng.integers(support.n_prompts))
        row = support.continuations[i]
        items.append(DemoPair(support.prompts[i], row[int(rng.integers(len(row)))]))
    beta = float(rng.uniform(0.3, 2.0))
    return support, ref, reward, DemoSet(tuple(items), support.vocab), beta


def _random_pair(rng, support):
    i = int(rng.integers(support.n_prompts))
    row = support.continuations[i]
    return support.prompts[i], row[int(rng.integers(len(row)))], row[int(rng.integers(len(row)))]


def _random_ar(rng):
    from .domain import Vocab
    V = int(rng.integers(3, 6))
    pol = AutoregressivePolicy(Vocab(V), max_len=3, end_token=V - 1,
                               n_buckets=int(rng.integers(1, 3)))
    pol = pol.with_params(rng.standard_normal(pol.n_params))
    x = tuple(int(t) for t in rng.integers(0, V, size=int(rng.integers(0, 3))))
    return pol, x, pol.sample(x, rng), pol.sample(x, rng)


def check_policy_gradients(rng, kernels, n_configs):
    k = kernels["grad_log_prob"]
    out = []
    for c in range(n_configs):
        support, ref, _, _, _ = random_instance(rng)
        x, y, _ = _random_pair(rng, support)
        pol = ref.with_params(rng.standard_normal(support.size))
        fd = fd_gradient(lambda th: pol.with_params(th).log_prob(x, y), pol.params, FD_EPS)
        out.append(compare(f"grad_log_prob[tabular #{c}]", fd, k(pol, x, y), FD_TOL))
        ar, x, y, _ = _random_ar(rng)
        fd = fd_gradient(lambda th: ar.with_params(th).log_prob(x, y), ar.params, FD_EPS)
        out.append(compare(f"grad_log_prob[autoregressive #{c}]", fd, k(ar, x, y), FD_TOL))
    return out


def check_reward_gradients(rng, kernels, n_configs):
    k = kernels["reward_grad"]
    out = []
    for c in range(n_configs):
        support, _, reward, _, _ = random_instance(rng)
        x, y, _ = _random_pair(rng, support)
        fd = fd_gradient(lambda th: reward.with_params(th).value(x, y), reward.params, FD_EPS)
        out.append(compare(f"reward_grad[tabular #{c}]", fd, k(reward, x, y), FD_TOL))
        feat = FeaturizedReward(support.vocab)
        feat = feat.with_params(rng.standard_normal(feat.n_params))
        fd = fd_gradient(lambda th: feat.with_params(th).value(x, y), feat.params, FD_EPS)
        out.append(compare(f"reward_grad[featurized #{c}]", fd, k(feat, x, y), FD_TOL))
    return out


def check_sft(rng, kernels, n_configs):
    k = kernels["sft_gradient"]
    out = []
    for c in range(n_configs):
        support, ref, _, data, _ = random_instance(rng)
        pol = ref.with_params(rng.standard_normal(support.size))
        batch = list(data.items)

        def loglik(th):
            p = pol.with_params(th)
            return float(np.mean([p.log_prob(d.prompt, d.continuation) for d in batch]))

        out.append(compare(f"sft_gradient[#{c}]", fd_gradient(loglik, pol.params, FD_EPS),
                           k(pol, batch), FD_TOL))
    return out


def check_rft(rng, kernels, n_configs):
    k = kernels["rft_reward_gradient"]
    out = []
    for c in range(n_configs):
        support, ref, reward, data, beta = random_instance(rng)
        x, y, ys = _random_pair(rng, support)
        s = GradSample(x, y, ys)

        def margin(th):
            r = reward.with_params(th)
            return (r.value(x, y) - r.value(x, ys)) / beta

        out.append(compare(f"rft_reward_gradient[#{c}]",
                           fd_gradient(margin, reward.params, FD_EPS), k(reward, s, beta), FD_TOL))
        # expectation over y~ from the induced policy is the exact ML-IRL gradient
        pi = induced_policy(reward, ref, beta)
        expected = np.zeros(support.size)
        for w, d in zip(data.item_weights(), data.items):
            conts, probs = pi.probs(d.prompt)
            for yt, p in zip(conts, probs):
                expected += w * p * k(reward, GradSample(d.prompt, d.continuation, yt), beta)
        prob = TabularProblem.from_demo_set(ref, data, beta)
        out.append(compare(f"rft_reward_gradient[expectation #{c}]",
                           prob.gradient(np.array(reward.params)), expected, EXACT_TOL))
    return out


def check_irft(rng, kernels, n_configs):
    k = kernels["irft_gradient"]
    out = []
    for c in range(n_configs):
        support, ref, _, _, beta = random_instance(rng)
        pol = ref.with_params(rng.standard_normal(support.size))
        x, y, ys = _random_pair(rng, support)
        s = GradSample(x, y, ys)
        for h in (IDENTITY, LOG_SIGMOID):
            def surrogate(th, h=h):
                return gradients.irft_surrogate(pol.with_params(th), ref, [s], beta, h)

            out.append(compare(f"irft_gradient[{h.kind} #{c}]",
                               fd_gradient(surrogate, pol.params, FD_EPS),
                               k(pol, ref, s, beta, h), FD_TOL))
    return out


def irft_expectation(kernel, reward, ref, data, beta):
    """Exact expectation of the single-sample IRFT gradient at the induced policy."""
    pi = induced_policy(reward, ref, beta)
    total = np.zeros(pi.n_params)
    for w, d in zip(data.item_weights(), data.items):
        conts, probs = pi.probs(d.prompt)
        for yt, p in zip(conts, probs):
            total += w * p * kernel(pi, ref, GradSample(d.prompt, d.continuation, yt), beta,
                                    IDENTITY)
    return total


def check_identities(rng, kernels, n_configs):
    out = []
    for c in range(n_configs):
        support, ref, reward, data, beta = random_instance(rng)
        fd = fd_gradient(lambda th: gradients.ml_irl_objective(reward.with_params(th), ref, data,
                                                               beta), reward.params, FD_EPS)
        out.append(compare(f"self_generation_identity[#{c}]", fd,
                           irft_expectation(kernels["irft_gradient"], reward, ref, data, beta),
                           FD_TOL))
        pi = induced_policy(reward, ref, beta)
        value = gradients.minimax_value(reward, pi, ref, data, beta)
        full = gradients.ml_irl_log_likelihood(reward, ref, data, beta)
        out.append(compare(f"minimax_offset[#{c}]",
                           full - gradients.demo_log_ref(ref, data), value, EXACT_TOL))
    return out


def check_example_optimum(rng, kernels, n_configs):
    out = []
    for c in range(n_configs):
        R, beta = float(rng.uniform(0.2, 3.0)), float(rng.uniform(0.3, 3.0))
        world = example1_world(R, beta)
        prob = TabularProblem.from_demo_set(world.ref, example1_demos(), beta, clamp=R)
        found = exact_stationary_points(prob, n_starts=4, seed=c)
        cand = found[0].policy if len(found) else np.full(3, np.nan)
        out.append(compare(f"example_optimum[R={R:.3f}, beta={beta:.3f}]", solve_example1(R, beta), cand,
                           FD_TOL))
    return out


CHECKS = (check_policy_gradients, check_reward_gradients, check_sft, check_rft, check_irft,
          check_identities, check_example_optimum)


def run_battery(seed=0, n_configs=10, kernels=None, max_prompts=3, max_continuations=5):
    """Run every registered check; returns the list of reports."""
    if max_prompts > MAX_PROMPTS or max_continuations > MAX_CONTINUATIONS:
        raise OracleRefusal(
            f"requested {max_prompts} prompts x {max_continuations} continuations; the oracle "
            f"enumerates at most {MAX_PROMPTS} x {MAX_CONTINUATIONS}")
    registry = dict(DEFAULT_KERNELS)
    registry.update(kernels or {})
    reports = []
    for i, check in enumerate(CHECKS):
        reports.extend(check(make_rng(seed, 7, i), registry, n_configs))
    return reports
