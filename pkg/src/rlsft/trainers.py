"""SFT, RFT (explicit reward learning) and IRFT (implicit reward learning).

RFT and IRFT share the same double loop: at the top of outer iteration ``t``
all ``K`` inner batches are drawn, with synthetic continuations generated
from a frozen policy (the induced policy for RFT, the parameter snapshot
``theta_{t,0}`` for IRFT); the inner loop then takes ``K`` ascent steps.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .domain import DemoSet
from .gradients import (GradSample, SurrogateShape, as_shape, irft_gradient_batch,
                        log_ratio_margin, rft_reward_gradient_batch, sft_gradient)
from .policies import DomainError, TabularPolicy, make_rng, same_family
from .rewards import TabularReward, check_beta, induced_policy

# stream tags passed to make_rng
_DATA_STREAM = 0
_SYNTH_STREAM = 1


class TrainingDivergence(FloatingPointError):
    """Parameters became non-finite."""

    def __init__(self, step, t, k):
        self.step, self.t, self.k = step, t, k
        super().__init__(f"non-finite parameters after step {step} (t={t}, k={k})")


@dataclass(frozen=True)
class TrainerConfig:
    T: int = 1
    K: int = 1
    eta: float = 0.1
    eta_schedule: str = "constant"
    beta: float = 1.0
    batch_size: int = 1
    h: str = "identity"
    seed: int = 0
    reward_clamp_R: float = None
    refresh_ref: bool = False

    def __post_init__(self):
        for name in ("T", "K", "batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v!r}")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise ValueError(f"eta must be positive, got {self.eta!r}")
        if self.eta_schedule not in ("constant", "inv_sqrt_TK"):
            raise ValueError(f"unknown eta_schedule {self.eta_schedule!r}")
        check_beta(self.beta)
        as_shape(self.h)
        if self.reward_clamp_R is not None and not self.reward_clamp_R > 0:
            raise ValueError("reward_clamp_R must be positive")

    @property
    def surrogate(self) -> SurrogateShape:
        return as_shape(self.h)

    def stepsize(self, t=0):
        if self.eta_schedule == "inv_sqrt_TK":
            return self.eta / math.sqrt(self.T * self.K)
        return self.eta

    @property
    def total_steps(self):
        return self.T * self.K

    def to_dict(self):
        return asdict(self)


def inner_iterations_for_epochs(n_samples, batch_size, epochs, T):
    """``K = (n_samples / batch_size) * (epochs / T)``, floored, at least 1."""
    k = Fraction(int(n_samples), int(batch_size)) * Fraction(epochs).limit_denominator() / int(T)
    return max(1, math.floor(k))


@dataclass
class TraceRecord:
    step: int
    t: int
    k: int
    eta: float
    grad_norm: float
    objective: float
    elapsed_ms: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    final_params: np.ndarray = None
    iterates: list = None

    def __len__(self):
        return len(self.records)

    @property
    def grad_norms(self):
        return np.array([r.grad_norm for r in self.records])

    COLUMNS = ("step", "t", "k", "eta", "grad_norm", "objective", "elapsed_ms")

    def to_csv(self, path, timing=True):
        """Write one row per step; ``timing=False`` blanks the wall-clock column."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.step, r.t, r.k, repr(r.eta), repr(r.grad_norm), repr(r.objective),
                            f"{r.elapsed_ms:.3f}" if timing else ""])

    @classmethod
    def from_csv(cls, path):
        recs = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                recs.append(TraceRecord(int(row["step"]), int(row["t"]), int(row["k"]),
                                        float(row["eta"]), float(row["grad_norm"]),
                                        float(row["objective"]),
                                        float(row["elapsed_ms"]) if row["elapsed_ms"] else math.nan))
        return cls(recs)


class DemoStream:
    """Seeded without-replacement traversal of a DemoSet, reshuffled each pass."""

    def __init__(self, data: DemoSet, rng):
        self.data = data
        self.rng = rng
        self._order = []
        self._pos = 0

    def next_batch(self, size):
        out = []
        while len(out) < size:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.data)).tolist()
                self._pos = 0
            out.append(self.data.items[self._order[self._pos]])
            self._pos += 1
        return out


def default_sampler(policy, x, y, rng):
    return policy.sample(x, rng)


def _draw_outer(stream, frozen, config, t, sampler):
    batches = []
    for k in range(config.K):
        demos = stream.next_batch(config.batch_size)
        rng = make_rng(config.seed, _SYNTH_STREAM, t, k)
        batches.append([GradSample(d.prompt, d.continuation,
                                   tuple(sampler(frozen, d.prompt, d.continuation, rng)))
                        for d in demos])
    return batches


class _Stepper:
    """Shared bookkeeping: stepsize, trace records, divergence guard."""

    def __init__(self, config, params, keep_iterates):
        self.config = config
        self.params = np.array(params, dtype=np.float64)
        self.trace = TrainTrace(iterates=[] if keep_iterates else None)
        self.step = 0
        self._clock = time.perf_counter()

    def apply(self, t, k, g, objective, project=None):
        eta = self.config.stepsize(t)
        if self.trace.iterates is not None:
            self.trace.iterates.append(self.params.copy())
        with np.errstate(over="ignore", invalid="ignore"):
            self.params = self.params + eta * g
        if project is not None:
            self.params = project(self.params)
        if not np.all(np.isfinite(self.params)):
            raise TrainingDivergence(self.step, t, k)
        now = time.perf_counter()
        self.trace.records.append(TraceRecord(self.step, t, k, eta, float(np.linalg.norm(g)),
                                              float(objective), (now - self._clock) * 1e3))
        self._clock = now
        self.step += 1

    def finish(self):
        self.trace.final_params = self.params.copy()
        if self.trace.iterates is not None:
            self.trace.iterates.append(self.params.copy())
        return self.trace


def run_sft(policy, data: DemoSet, config: TrainerConfig, keep_iterates=False):
    """Stochastic ascent on the mean demonstration log-likelihood."""
    stream = DemoStream(data, make_rng(config.seed, _DATA_STREAM))
    st = _Stepper(config, policy.params, keep_iterates)
    for t in range(config.T):
        for k in range(config.K):
            batch = stream.next_batch(config.batch_size)
            current = policy.with_params(st.params)
            g = sft_gradient(current, batch)
            obj = float(np.mean([current.log_prob(d.prompt, d.continuation) for d in batch]))
            st.apply(t, k, g, obj)
    return policy.with_params(st.params), st.finish()


def run_rft(reward, ref: TabularPolicy, data: DemoSet, config: TrainerConfig, sampler=None,
            keep_iterates=False):
    """Explicit reward learning with closed-form policy alignment.

    Returns ``(reward, policy, trace)`` where ``policy`` is the induced policy
    of the final reward. The initial sampling policy is ``ref`` itself.
    """
    if not isinstance(ref, TabularPolicy):
        raise DomainError("RFT needs a tabular reference: policy alignment is closed-form")
    sampler = sampler or default_sampler
    if config.reward_clamp_R is not None:
        if not isinstance(reward, TabularReward):
            raise DomainError("reward clamping is only defined for tabular rewards")
        reward = TabularReward(reward.support, reward.params, clamp=config.reward_clamp_R)
    beta = config.beta
    stream = DemoStream(data, make_rng(config.seed, _DATA_STREAM))
    st = _Stepper(config, reward.project_params(np.array(reward.params)), keep_iterates)
    frozen = ref
    for t in range(config.T):
        batches = _draw_outer(stream, frozen, config, t, sampler)
        for k, samples in enumerate(batches):
            current = reward.with_params(st.params)
            g = rft_reward_gradient_batch(current, samples, beta)
            obj = float(np.mean([(current.value(s.prompt, s.demo)
                                  - current.value(s.prompt, s.synthetic)) / beta for s in samples]))
            st.apply(t, k, g, obj, project=reward.project_params)
        frozen = induced_policy(reward.with_params(st.params), ref, beta)
    final = reward.with_params(st.params)
    return final, frozen, st.finish()


def run_irft(policy, ref, data: DemoSet, config: TrainerConfig, sampler=None,
             keep_iterates=False):
    """Implicit reward learning via the self-generation gradient.

    Synthetic continuations for outer iteration ``t`` come from the snapshot
    at ``theta_{t,0}``; gradients are evaluated at the current iterate.
    ``ref`` stays frozen unless ``config.refresh_ref`` is set, in which case
    it is replaced by each new snapshot.
    """
    if not same_family(policy, ref):
        raise DomainError("policy and reference must share family and vocabulary")
    sampler = sampler or default_sampler
    h = config.surrogate
    beta = config.beta
    stream = DemoStream(data, make_rng(config.seed, _DATA_STREAM))
    st = _Stepper(config, policy.params, keep_iterates)
    for t in range(config.T):
        snapshot = policy.with_params(st.params)
        if config.refresh_ref and t > 0:
            ref = snapshot
        batches = _draw_outer(stream, snapshot, config, t, sampler)
        for k, samples in enumerate(batches):
            current = policy.with_params(st.params)
            g = irft_gradient_batch(current, ref, samples, beta, h)
            obj = float(np.mean([h(log_ratio_margin(current, ref, s, beta)) for s in samples]))
            st.apply(t, k, g, obj)
    return policy.with_params(st.params), st.finish()


def with_overrides(config: TrainerConfig, **changes) -> TrainerConfig:
    return replace(config, **changes)
