import numpy as np
import pytest

from rlsft.battery import DEFAULT_KERNELS, run_battery
from rlsft.gradients import irft_gradient, sft_gradient
from rlsft.oracle import OracleRefusal
from rlsft.rewards import reward_grad


def failures(reports):
    return sorted({r.quantity.split("[")[0] for r in reports if not r.passed})


def test_default_battery_passes_on_fresh_seeds():
    for seed in (0, 17):
        reports = run_battery(seed, n_configs=3)
        assert failures(reports) == []
        assert {r.quantity.split("[")[0] for r in reports} >= {
            "grad_log_prob", "reward_grad", "sft_gradient", "rft_reward_gradient",
            "irft_gradient", "self_generation_identity", "minimax_offset", "example_optimum"}


@pytest.mark.parametrize("name,bad", [
    ("sft_gradient", lambda pol, batch: 1.001 * sft_gradient(pol, batch)),
    ("reward_grad", lambda r, x, y: reward_grad(r, x, y)[::-1].copy()),
    ("irft_gradient", lambda p, ref, s, beta, h: -irft_gradient(p, ref, s, beta, h)),
])
def test_corrupted_kernel_is_named(name, bad):
    reports = run_battery(0, n_configs=2, kernels={name: bad})
    failed = failures(reports)
    assert name in failed
    # an untouched kernel still passes
    untouched = "sft_gradient" if name != "sft_gradient" else "reward_grad"
    assert untouched not in failed


def test_oversized_request_is_refused():
    with pytest.raises(OracleRefusal, match="at most 4 x 8"):
        run_battery(0, n_configs=1, max_prompts=5)


def test_registry_lists_every_kernel():
    assert set(DEFAULT_KERNELS) == {"grad_log_prob", "reward_grad", "sft_gradient",
                                    "rft_reward_gradient", "irft_gradient"}
