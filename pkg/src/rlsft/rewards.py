"""Linear reward models, the KL-regularized policy they induce, and the
implicit reward recovered from a policy / reference log-ratio."""

from __future__ import annotations

import numpy as np

from .domain import Vocab
from .policies import DomainError, TabularPolicy, TabularSupport, _as_params


def check_beta(beta):
    beta = float(beta)
    if not np.isfinite(beta) or beta <= 0:
        raise ValueError(f"beta must be a positive finite number, got {beta!r}")
    return beta


class TabularReward:
    """One free reward value per (prompt, continuation) cell.

    ``clamp`` is the upper bound R of the admissible box [0, R]; it is
    enforced by :meth:`project`, which trainers call after every update.
    """

    family = "tabular_reward"

    def __init__(self, support: TabularSupport, params=None, clamp=None):
        self.support = support
        self.params = np.zeros(support.size) if params is None else _as_params(params, support.size)
        self.params.setflags(write=False)
        if clamp is not None:
            clamp = float(clamp)
            if not clamp > 0:
                raise ValueError("clamp bound R must be positive")
        self.clamp = clamp

    @property
    def vocab(self):
        return self.support.vocab

    @property
    def n_params(self):
        return self.support.size

    def with_params(self, params):
        return TabularReward(self.support, params, self.clamp)

    def project_params(self, params):
        if self.clamp is None:
            return params
        return np.clip(params, 0.0, self.clamp)

    def project(self):
        return self.with_params(self.project_params(self.params))

    def value(self, x, y):
        return float(self.params[self.support.cell(x, y)[2]])

    def grad(self, x, y):
        g = np.zeros(self.n_params)
        g[self.support.cell(x, y)[2]] = 1.0
        return g

    def table(self, support=None):
        if support is not None and support != self.support:
            raise DomainError("reward and policy enumerate different continuations")
        return np.array(self.params)

    def __repr__(self):
        return f"TabularReward(n_params={self.n_params}, clamp={self.clamp})"


class FeaturizedReward:
    """``r(x, y) = w . phi(x, y)`` with bigram counts plus a length feature.

    Bigram ``(a, b)`` counts consecutive tokens inside the continuation; the
    first continuation token is paired with the last prompt token, or with a
    begin marker (index ``V``) when the prompt is empty.
    """

    family = "featurized_reward"

    def __init__(self, vocab: Vocab, params=None, clamp=None):
        self._vocab = vocab
        V = vocab.size
        self.n_bigrams = (V + 1) * V
        n = self.n_bigrams + 1
        self.params = np.zeros(n) if params is None else _as_params(params, n)
        self.params.setflags(write=False)
        self.clamp = clamp

    @property
    def vocab(self):
        return self._vocab

    @property
    def n_params(self):
        return self.params.shape[0]

    def with_params(self, params):
        return FeaturizedReward(self._vocab, params, self.clamp)

    def project_params(self, params):
        return params

    def project(self):
        return self

    def bigram_index(self, a, b):
        return a * self._vocab.size + b

    def features(self, x, y):
        x, y = tuple(x), tuple(y)
        V = self._vocab.size
        if not self._vocab.contains(x) or not self._vocab.contains(y):
            raise DomainError("token out of vocab range")
        phi = np.zeros(self.n_params)
        prev = x[-1] if x else V
        for tok in y:
            phi[self.bigram_index(prev, tok)] += 1.0
            prev = tok
        phi[-1] = len(y)
        return phi

    def value(self, x, y):
        return float(self.features(x, y) @ self.params)

    def grad(self, x, y):
        return self.features(x, y)

    def table(self, support):
        return np.array([self.value(x, y)
                         for x, row in zip(support.prompts, support.continuations) for y in row])

    def __repr__(self):
        return f"FeaturizedReward(V={self._vocab.size}, n_params={self.n_params})"


def reward_value(reward, x, y):
    return reward.value(tuple(x), tuple(y))


def reward_grad(reward, x, y):
    return reward.grad(tuple(x), tuple(y))


def induced_policy(reward, ref: TabularPolicy, beta) -> TabularPolicy:
    """Closed-form maximizer of ``E[r] - beta * KL(pi || ref)``.

    ``pi(y|x) = ref(y|x) exp(r(x,y)/beta) / Z(x)``. The returned policy keeps
    the reward values as its parameters (``base = log ref``, ``scale = 1/beta``),
    so ``grad_log_prob`` on it differentiates with respect to the reward of a
    :class:`TabularReward`.
    """
    beta = check_beta(beta)
    if not isinstance(ref, TabularPolicy):
        raise DomainError("the closed-form policy needs a tabular reference")
    if isinstance(reward, TabularReward) and reward.support != ref.support:
        raise DomainError("reward and reference enumerate different continuations")
    return TabularPolicy(ref.support, reward.table(ref.support), base=ref.log_prob_table(),
                         scale=1.0 / beta)


def implicit_reward(policy, ref, beta, x, y):
    """``beta * log(pi(y|x) / ref(y|x))``, i.e. the reward up to ``beta log Z(x)``.

    Only differences at a fixed prompt are meaningful.
    """
    beta = check_beta(beta)
    return beta * (policy.log_prob(tuple(x), tuple(y)) - ref.log_prob(tuple(x), tuple(y)))
