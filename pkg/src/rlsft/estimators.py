"""scikit-learn style wrappers around the three trainers.

``X`` is a :class:`~rlsft.domain.DemoSet` (or a sequence of
``(prompt, continuation)`` pairs, converted against the reference vocab).
Hyperparameters live on the constructor so ``get_params`` / ``set_params``
and ``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .domain import DemoSet, PrefSet, demo_set_from_pairs
from .evaluation import log_prob_gap
from .rewards import TabularReward
from .trainers import TrainerConfig, run_irft, run_rft, run_sft


def check_demos(X, vocab) -> DemoSet:
    """Coerce ``X`` to a DemoSet over ``vocab``; raises ValueError when empty."""
    if isinstance(X, DemoSet):
        if X.vocab != vocab:
            raise ValueError(f"demonstrations use vocab of size {X.vocab.size}, "
                             f"the model uses {vocab.size}")
        return X
    pairs = list(X)
    if not pairs:
        raise ValueError("no demonstrations given")
    return demo_set_from_pairs(pairs, vocab)


def _mean_log_prob(policy, data):
    return float(np.mean([policy.log_prob(d.prompt, d.continuation) for d in data]))


class _FineTuner(BaseEstimator):
    def __init__(self, ref=None, init=None, T=1, K=1, eta=0.1, eta_schedule="constant",
                 beta=1.0, batch_size=1, seed=0):
        self.ref = ref
        self.init = init
        self.T = T
        self.K = K
        self.eta = eta
        self.eta_schedule = eta_schedule
        self.beta = beta
        self.batch_size = batch_size
        self.seed = seed

    def _config(self, **extra):
        names = ("T", "K", "eta", "eta_schedule", "beta", "batch_size", "seed")
        return TrainerConfig(**{n: getattr(self, n) for n in names}, **extra)

    def _start(self):
        if self.ref is None:
            raise ValueError("a reference policy is required")
        return self.ref if self.init is None else self.init

    def score(self, X, y=None):
        """Mean log-likelihood of demonstrations, or mean log-prob gap for a PrefSet."""
        check_is_fitted(self, "policy_")
        if isinstance(X, PrefSet):
            return log_prob_gap(self.policy_, X).mean
        return _mean_log_prob(self.policy_, check_demos(X, self.policy_.vocab))

    def sample(self, prompts, rng):
        check_is_fitted(self, "policy_")
        return [self.policy_.sample(tuple(x), rng) for x in prompts]


class SFTFineTuner(_FineTuner):
    """Maximum-likelihood fine-tuning; starts from ``init`` or ``ref``."""

    def fit(self, X, y=None):
        start = self._start()
        data = check_demos(X, start.vocab)
        self.policy_, self.trace_ = run_sft(start, data, self._config())
        return self


class IRFTFineTuner(_FineTuner):
    """Implicit reward fine-tuning with the self-generation gradient."""

    def __init__(self, ref=None, init=None, T=1, K=1, eta=0.1, eta_schedule="constant",
                 beta=1.0, batch_size=1, seed=0, h="identity", refresh_ref=False):
        super().__init__(ref, init, T, K, eta, eta_schedule, beta, batch_size, seed)
        self.h = h
        self.refresh_ref = refresh_ref

    def fit(self, X, y=None):
        start = self._start()
        data = check_demos(X, start.vocab)
        config = self._config(h=self.h, refresh_ref=self.refresh_ref)
        self.policy_, self.trace_ = run_irft(start, self.ref, data, config)
        return self


class RFTFineTuner(_FineTuner):
    """Explicit reward learning; ``init`` is the starting reward (zeros if None)."""

    def __init__(self, ref=None, init=None, T=1, K=1, eta=0.1, eta_schedule="constant",
                 beta=1.0, batch_size=1, seed=0, reward_clamp_R=None):
        super().__init__(ref, init, T, K, eta, eta_schedule, beta, batch_size, seed)
        self.reward_clamp_R = reward_clamp_R

    def fit(self, X, y=None):
        if self.ref is None:
            raise ValueError("a reference policy is required")
        reward = self.init if self.init is not None else TabularReward(self.ref.support)
        data = check_demos(X, self.ref.vocab)
        config = self._config(reward_clamp_R=self.reward_clamp_R)
        self.reward_, self.policy_, self.trace_ = run_rft(reward, self.ref, data, config)
        return self
