"""Loss and gradient kernels for SFT, RFT and IRFT, plus exact tabular objectives.

Every kernel returns an ASCENT direction on the quantity being maximized;
trainers apply ``theta += eta * g``. Batched variants reduce by the
arithmetic mean in input order, so results do not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .domain import DemoPair, DemoSet
from .policies import DomainError, TabularPolicy
from .rewards import check_beta, implicit_reward


@dataclass(frozen=True)
class SurrogateShape:
    """Nonlinearity ``h`` applied to the log-ratio margin in the IRFT loss.

    ``identity`` gives the plain self-generation gradient; ``log_sigmoid`` is
    ``h(t) = -log(1 + exp(-t))`` as used by DPO/SPIN-style losses.
    """

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "log_sigmoid"):
            raise ValueError(f"unknown surrogate shape {self.kind!r}")

    def __call__(self, t):
        if self.kind == "identity":
            return t
        return -np.logaddexp(0.0, -t)

    def derivative(self, t):
        if self.kind == "identity":
            return 1.0 if np.ndim(t) == 0 else np.ones_like(t)
        return expit(-t)


IDENTITY = SurrogateShape("identity")
LOG_SIGMOID = SurrogateShape("log_sigmoid")


def as_shape(h):
    return h if isinstance(h, SurrogateShape) else SurrogateShape(str(h))


@dataclass(frozen=True)
class GradSample:
    """A prompt with one demonstration and one synthetic continuation."""

    prompt: tuple
    demo: tuple
    synthetic: tuple


def _pairs(batch):
    out = []
    for item in batch:
        if isinstance(item, DemoPair):
            out.append((item.prompt, item.continuation))
        else:
            x, y = item
            out.append((tuple(x), tuple(y)))
    return out


def _mean(vectors):
    if not vectors:
        raise DomainError("empty batch")
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total += v
    return total / len(vectors)


def sft_gradient(policy, batch) -> np.ndarray:
    """Batch mean of ``grad log pi(y|x)`` over demonstration pairs."""
    pairs = _pairs(batch)
    if not pairs:
        raise DomainError("empty batch")
    return _mean([policy.grad_log_prob(x, y) for x, y in pairs])


def rft_reward_gradient(reward, sample: GradSample, beta) -> np.ndarray:
    """``(grad r(x, y) - grad r(x, y~)) / beta`` for one sample."""
    beta = check_beta(beta)
    return (reward.grad(sample.prompt, sample.demo)
            - reward.grad(sample.prompt, sample.synthetic)) / beta


def rft_reward_gradient_batch(reward, samples, beta) -> np.ndarray:
    return _mean([rft_reward_gradient(reward, s, beta) for s in samples])


def log_ratio_margin(policy, ref, sample: GradSample, beta) -> float:
    """Implicit-reward margin ``(r_hat(x, y) - r_hat(x, y~)) / beta``.

    The ``beta log Z(x)`` term cancels in the difference, so this equals
    ``log(pi/ref)(y) - log(pi/ref)(y~)`` for any beta.
    """
    x = sample.prompt
    return (implicit_reward(policy, ref, beta, x, sample.demo)
            - implicit_reward(policy, ref, beta, x, sample.synthetic)) / beta


def irft_gradient(policy, ref, sample: GradSample, beta, h=IDENTITY) -> np.ndarray:
    """Ascent direction on ``h(margin)`` with the synthetic sample held fixed.

    ``h'(margin) * (grad log pi(y|x) - grad log pi(y~|x))``. The reference
    model only enters through the margin, hence not at all for ``identity``.
    """
    h = as_shape(h)
    x = sample.prompt
    if sample.demo == sample.synthetic:
        return np.zeros(policy.n_params)
    g = policy.grad_log_prob(x, sample.demo) - policy.grad_log_prob(x, sample.synthetic)
    if h.kind == "identity":
        return g
    return float(h.derivative(log_ratio_margin(policy, ref, sample, beta))) * g


def irft_gradient_batch(policy, ref, samples, beta, h=IDENTITY) -> np.ndarray:
    return _mean([irft_gradient(policy, ref, s, beta, h) for s in samples])


def irft_surrogate(policy, ref, samples, beta, h=IDENTITY) -> float:
    """Batch mean of ``h(margin)``; the scalar that ``irft_gradient_batch`` ascends."""
    h = as_shape(h)
    return float(np.mean([h(log_ratio_margin(policy, ref, s, beta)) for s in samples]))


# ------------------------------------------------------ exact tabular values


def _require_tabular(ref):
    if not isinstance(ref, TabularPolicy):
        raise DomainError("exact objectives need a tabular reference policy (enumeration)")


def _reward_rows(reward, ref):
    table = reward.table(ref.support)
    sup = ref.support
    return [table[sup.slice(i)] for i in range(sup.n_prompts)]


def ml_irl_objective(reward, ref, data: DemoSet, beta) -> float:
    """Single-level ML-IRL objective by full enumeration.

    ``E_{(x,y)~D}[ r(x,y)/beta - log sum_y~ ref(y~|x) exp(r(x,y~)/beta) ]``.
    The ``E[log ref(y|x)]`` term of the full demo log-likelihood is omitted;
    see :func:`ml_irl_log_likelihood`.
    """
    beta = check_beta(beta)
    _require_tabular(ref)
    sup = ref.support
    rows = _reward_rows(reward, ref)
    log_ref = ref.log_prob_table()
    log_z = [logsumexp(log_ref[sup.slice(i)] + rows[i] / beta) for i in range(sup.n_prompts)]
    total = 0.0
    for w, it in zip(data.item_weights(), data.items):
        i, j, _ = sup.cell(it.prompt, it.continuation)
        total += w * (rows[i][j] / beta - log_z[i])
    return float(total)


def ml_irl_log_likelihood(reward, ref, data: DemoSet, beta) -> float:
    """``E_D[log pi_theta(y|x)]`` for the reward-induced policy pi_theta."""
    beta = check_beta(beta)
    _require_tabular(ref)
    sup = ref.support
    rows = _reward_rows(reward, ref)
    log_ref = ref.log_prob_table()
    total = 0.0
    for w, it in zip(data.item_weights(), data.items):
        i, j, _ = sup.cell(it.prompt, it.continuation)
        z = log_ref[sup.slice(i)] + rows[i] / beta
        total += w * (z[j] - logsumexp(z))
    return float(total)


def demo_log_ref(ref, data: DemoSet) -> float:
    """``E_D[log ref(y|x)]``, the constant separating the two objectives above."""
    return float(sum(w * ref.log_prob(it.prompt, it.continuation)
                     for w, it in zip(data.item_weights(), data.items)))


def kl_divergence(p, q, log_p, log_q) -> float:
    """Exact KL(p || q) for one row; ``inf`` if q has no mass where p does."""
    mask = p > 0
    if np.any(np.isneginf(log_q[mask])):
        return math.inf
    return float(np.sum(p[mask] * (log_p[mask] - log_q[mask])))


def minimax_value(reward, inner_policy: TabularPolicy, ref: TabularPolicy, data: DemoSet,
                  beta) -> float:
    """Exact value of the max-min objective at (reward, inner policy).

    ``E_{x, y~D, y~ ~ inner}[(r(x,y) - r(x,y~))/beta + KL(inner(.|x) || ref(.|x))]``.
    Returns ``math.inf`` when the KL term is infinite.
    """
    beta = check_beta(beta)
    _require_tabular(ref)
    _require_tabular(inner_policy)
    if inner_policy.support != ref.support:
        raise DomainError("inner policy and reference enumerate different continuations")
    sup = ref.support
    rows = _reward_rows(reward, ref)
    log_inner = inner_policy.log_prob_table()
    log_ref = ref.log_prob_table()
    per_prompt = {}
    for i in range(sup.n_prompts):
        sl = sup.slice(i)
        p = np.exp(log_inner[sl])
        kl = kl_divergence(p, np.exp(log_ref[sl]), log_inner[sl], log_ref[sl])
        per_prompt[i] = (float(p @ rows[i]) / beta, kl)
    total = 0.0
    for w, it in zip(data.item_weights(), data.items):
        i, j, _ = sup.cell(it.prompt, it.continuation)
        expected_syn, kl = per_prompt[i]
        if math.isinf(kl):
            return math.inf
        total += w * (rows[i][j] / beta - expected_syn + kl)
    return float(total)
