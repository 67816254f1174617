import math

import numpy as np
import pytest

from rlsft.domain import DemoSet
from rlsft.evaluation import bt_diagnostic
from rlsft.oracle import TabularProblem, exact_stationary_points
from rlsft.policies import TabularPolicy, make_rng
from rlsft.rewards import TabularReward
from rlsft.synth import (SynthesisError, World, example1_world, load_world,
                         random_tabular_world, synth_demo, synth_pref)


def empirical(policy, demos, prompt_row):
    sup = policy.support
    x = sup.prompts[prompt_row]
    counts = np.zeros(len(sup.continuations[prompt_row]))
    for d in demos:
        if d.prompt == x:
            counts[sup.cell(x, d.continuation)[1]] += 1
    return counts / counts.sum()


def test_large_beta_star_demos_follow_ref():
    w = example1_world(1.0, 1e9)
    ref = TabularPolicy(w.support, [0.5, -0.3, 0.0])
    w = World(w.support, w.prompt_weights, w.gt_reward, ref, 1e9)
    n = 100_000
    demos = synth_demo(w, n, make_rng(0))
    tv = 0.5 * np.abs(empirical(ref, demos, 0) - ref.row_probs(0)).sum()
    assert tv < 4 / math.sqrt(n)


def test_huge_reward_demos_are_y3():
    w = example1_world(50.0, 1.0)
    demos = synth_demo(w, 5000, make_rng(1))
    frac = np.mean([d.continuation == (2,) for d in demos])
    assert frac >= 0.999


def test_same_seed_same_dataset():
    w = random_tabular_world(make_rng(2))
    a = synth_demo(w, 50, make_rng(3))
    assert a.items == synth_demo(w, 50, make_rng(3)).items
    assert a.items != synth_demo(w, 50, make_rng(4)).items


def test_point_mass_sampler_errors_with_prompt():
    w = example1_world()
    point = TabularPolicy(w.support, [0.0, 0.0, 0.0])

    class Stuck:
        def sample(self, x, rng):
            return (1,)

    with pytest.raises(SynthesisError, match=r"prompt \(\)"):
        synth_pref(w, Stuck(), 3, make_rng(0))
    # a proper sampler works
    assert len(synth_pref(w, point, 3, make_rng(0))) == 3


def test_labels_follow_gt_reward():
    w = example1_world()
    w = World(w.support, w.prompt_weights, TabularReward(w.support, [0.0, 0.5, 1.0]), w.ref, 1.0)
    prefs = synth_pref(w, w.ref, 300, make_rng(5))
    for t in prefs:
        assert w.gt_reward.value(t.prompt, t.chosen) > w.gt_reward.value(t.prompt, t.rejected)
    assert bt_diagnostic(w.gt_reward, prefs).accuracy == 1.0


def test_tied_rewards_are_skipped():
    w = example1_world()       # y1 and y2 tie at reward 0
    prefs = synth_pref(w, w.ref, 200, make_rng(6))
    assert len(prefs) == 200
    assert all(t.chosen == (2,) for t in prefs)
    # a sampler that only proposes the tied pair never yields a triple
    only_ties = TabularPolicy(w.support, [0.0, 0.0, -1e9])
    with pytest.raises(SynthesisError, match="tie"):
        synth_pref(w, only_ties, 20, make_rng(6), max_retries=5)


def test_bt_noise_flips_some_labels():
    w = random_tabular_world(make_rng(7), reward_scale=0.3)
    prefs = synth_pref(w, w.ref, 400, make_rng(8), bt_noise=True)
    acc = bt_diagnostic(w.gt_reward, prefs).accuracy
    assert 0.5 < acc < 1.0


def test_world_validation():
    w = example1_world()
    with pytest.raises(ValueError):
        World(w.support, np.array([0.5]), w.gt_reward, w.ref, 1.0)
    with pytest.raises(ValueError):
        World(w.support, w.prompt_weights, w.gt_reward, w.ref, 0.0)


def test_world_round_trip(tmp_path):
    w = random_tabular_world(make_rng(9), 2, 3)
    w.save(tmp_path)
    back = load_world(tmp_path / "world.json")
    assert back.support == w.support
    assert np.array_equal(back.prompt_weights, w.prompt_weights)
    assert np.array_equal(back.gt_reward.params, w.gt_reward.params)
    assert np.array_equal(back.expert.log_prob_table(), w.expert.log_prob_table())


def test_expert_is_recovered_by_exact_ascent():
    w = random_tabular_world(make_rng(10), 2, 4)
    demos = synth_demo(w, 100_000, make_rng(11))
    prob = TabularProblem.from_demo_set(w.ref, demos, w.beta_star)
    found = exact_stationary_points(prob, n_starts=3)
    assert len(found)
    expert = w.expert
    for i in range(w.support.n_prompts):
        sl = w.support.slice(i)
        assert 0.5 * np.abs(found[0].policy[sl] - expert.row_probs(i)).sum() < 0.02
