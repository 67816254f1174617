import json
import math

import numpy as np
import pytest

from rlsft.domain import DemoPair, DemoSet, Vocab
from rlsft.gradients import ml_irl_objective, rft_reward_gradient, GradSample
from rlsft.oracle import (OracleError, OracleRefusal, OracleReport, TabularProblem, compare,
                          exact_stationary_points, fd_gradient, format_table, report_lines,
                          solve_example1)
from rlsft.policies import TabularPolicy, TabularSupport
from rlsft.rewards import TabularReward, induced_policy
from rlsft.synth import example1_demos, example1_world, random_support


def test_fd_quadratic():
    g = fd_gradient(lambda th: float(np.sum(th ** 2)), np.array([1.0, 2.0]), 1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_constant():
    assert not np.any(fd_gradient(lambda th: 3.0, np.zeros(4)))


def test_fd_names_bad_coordinate():
    def f(th):
        return math.inf if th[1] > 0 else 0.0

    with pytest.raises(OracleError, match="coordinate 1"):
        fd_gradient(f, np.zeros(3))
    with pytest.raises(ValueError):
        fd_gradient(f, np.zeros(3), eps=0)


def test_fd_of_objective_matches_rft_expectation():
    gen = np.random.default_rng(40)
    sup = random_support(gen, 2, 4, 5, 2)
    ref = TabularPolicy(sup, gen.standard_normal(sup.size))
    reward = TabularReward(sup, gen.standard_normal(sup.size))
    data = DemoSet(tuple(DemoPair(sup.prompts[i % 2], sup.continuations[i % 2][i % 4])
                         for i in range(7)), sup.vocab)
    beta = 0.9
    pi = induced_policy(reward, ref, beta)
    exp = np.zeros(sup.size)
    for w, d in zip(data.item_weights(), data.items):
        conts, probs = pi.probs(d.prompt)
        for yt, p in zip(conts, probs):
            exp += w * p * rft_reward_gradient(reward, GradSample(d.prompt, d.continuation, yt),
                                               beta)
    fd = fd_gradient(lambda th: ml_irl_objective(reward.with_params(th), ref, data, beta),
                     reward.params)
    assert np.max(np.abs(fd - exp)) < 1e-6


def test_solve_example1_values():
    assert np.allclose(solve_example1(1.0, 1.0), [0.21194, 0.21194, 0.57612], atol=5e-6)
    assert np.allclose(solve_example1(1.0, 1e9), [1 / 3] * 3, atol=1e-9)
    gen = np.random.default_rng(0)
    for _ in range(20):
        R, beta = gen.uniform(0.1, 5), gen.uniform(0.1, 5)
        p = solve_example1(R, beta)
        assert abs(p.sum() - 1) < 1e-15
        e = math.exp(R / beta)
        assert p[2] == pytest.approx(e / (2 + e), rel=1e-13)
        assert p[0] == pytest.approx(1 / (2 + e), rel=1e-13)
    with pytest.raises(ValueError):
        solve_example1(0.0, 1.0)


def test_problem_objective_matches_kernel_free_formula():
    world = example1_world()
    prob = TabularProblem.from_demo_set(world.ref, example1_demos(), 1.0, clamp=1.0)
    r = np.array([0.0, 0.0, 1.0])
    assert prob.objective(r) == pytest.approx(ml_irl_objective(world.gt_reward, world.ref,
                                                               example1_demos(), 1.0), abs=1e-14)
    fd = fd_gradient(prob.objective, r)
    assert np.allclose(fd, prob.gradient(r), atol=1e-9)


def test_example1_unique_stationary_point():
    world = example1_world(1.0, 1.0)
    prob = TabularProblem.from_demo_set(world.ref, example1_demos(), 1.0, clamp=1.0)
    found = exact_stationary_points(prob, n_starts=8, seed=0)
    assert len(found) == 1
    assert np.max(np.abs(found[0].policy - solve_example1(1.0, 1.0))) < 1e-6
    assert found[0].grad_norm < 1e-9
    again = exact_stationary_points(prob, n_starts=8, seed=7)
    assert np.allclose(again[0].policy, found[0].policy, atol=1e-9)


def test_uncovered_prompt_cells_pushed_to_zero():
    vocab = Vocab(4)
    sup = TabularSupport(vocab, [(0,), (1,)], [[(1,), (2,)], [(2,), (3,)]])
    ref = TabularPolicy(sup)
    data = DemoSet((DemoPair((0,), (1,)),), vocab, prompt_weights={(0,): 0.5, (1,): 0.5})
    prob = TabularProblem.from_demo_set(ref, data, 1.0, clamp=2.0,
                                        prompt_weights=[0.5, 0.5])
    r = np.array([0.3, 0.1, 0.7, 1.2])
    g = prob.gradient(r)
    pi = prob.policy(r)
    assert np.allclose(g[2:], -0.5 * pi[2:])
    found = exact_stationary_points(prob, n_starts=4)
    assert np.allclose(found[0].params[2:], 0.0, atol=1e-12)


def test_symmetric_instance_gives_symmetric_policy():
    vocab = Vocab(3)
    sup = TabularSupport.single_prompt(vocab, [(0,), (1,), (2,)])
    data = DemoSet((DemoPair((), (0,)), DemoPair((), (1,))), vocab)
    prob = TabularProblem.from_demo_set(TabularPolicy(sup), data, 1.0, clamp=1.0)
    found = exact_stationary_points(prob)
    p = found[0].policy
    assert abs(p[0] - p[1]) < 1e-9


def test_exhausted_budget_reports_diagnostic():
    world = example1_world()
    prob = TabularProblem.from_demo_set(world.ref, example1_demos(), 1.0, clamp=1.0)
    found = exact_stationary_points(prob, n_starts=2, max_iter=1, tol=0.0)
    assert len(found) == 0
    assert "no start" in found.diagnostic


def test_size_bound_refusal():
    vocab = Vocab(6)
    gen = np.random.default_rng(1)
    sup = random_support(gen, 5, 3, 6, 2)
    prob = TabularProblem(TabularPolicy(sup), np.full(5, 0.2), np.zeros(sup.size), 1.0)
    with pytest.raises(OracleRefusal, match="at most 4 x 8"):
        exact_stationary_points(prob)
    wide = TabularSupport.single_prompt(vocab, [(a, b) for a in range(3) for b in range(3)])
    with pytest.raises(OracleRefusal):
        TabularProblem(TabularPolicy(wide), np.ones(1), np.zeros(9), 1.0).check_size()


def test_report_verdicts_and_serialization():
    ok = compare("thing", [1.0, 2.0], [1.0, 2.0 + 1e-9], 1e-6)
    bad = compare("other", 1.0, 1.1, 1e-6)
    nan = compare("nan", [1.0], [float("nan")], 1e-6)
    assert ok.passed and ok.verdict == "pass"
    assert not bad.passed and not nan.passed
    assert OracleReport("q", 0, 0, 1e-6, 1e-6).passed
    table = format_table([ok, bad])
    assert "thing" in table and "fail" in table
    recs = [json.loads(line) for line in report_lines([ok, bad])]
    assert recs[1]["verdict"] == "fail" and recs[0]["candidate"] == [1.0, 2.000000001]
