"""Ground-truth worlds: a hidden reward, the expert it induces, and data drawn
from them, so every experiment can be checked against known answers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .domain import DemoPair, DemoSet, PrefSet, PrefTriple, Vocab
from .policies import TabularPolicy, TabularSupport, _draw_index
from .rewards import TabularReward, check_beta, induced_policy


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class World:
    """Tabular world; the expert is ``induced_policy(gt_reward, ref, beta_star)``."""

    support: TabularSupport
    prompt_weights: np.ndarray
    gt_reward: object
    ref: TabularPolicy
    beta_star: float

    def __post_init__(self):
        w = np.asarray(self.prompt_weights, dtype=np.float64)
        if w.shape != (self.support.n_prompts,) or np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("prompt_weights must be a probability vector over the prompts")
        object.__setattr__(self, "prompt_weights", w)
        check_beta(self.beta_star)
        if self.ref.support != self.support:
            raise ValueError("reference policy must enumerate the world's support")

    @property
    def vocab(self) -> Vocab:
        return self.support.vocab

    @property
    def prompts(self):
        return self.support.prompts

    @property
    def expert(self) -> TabularPolicy:
        return induced_policy(self.gt_reward, self.ref, self.beta_star)

    def draw_prompt(self, rng):
        return self.support.prompts[_draw_index(self.prompt_weights, rng)]

    def save(self, directory):
        """Write ``world.json`` plus the two model checkpoints it references."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.gt_reward, directory / "gt_reward.ckpt")
        save_checkpoint(self.ref, directory / "ref.ckpt")
        desc = {"vocab_size": self.vocab.size, "labels": list(self.vocab.labels),
                "support": self.support.to_record(),
                "prompt_weights": [float(w) for w in self.prompt_weights],
                "beta_star": self.beta_star,
                "gt_reward": "gt_reward.ckpt", "ref": "ref.ckpt"}
        path = directory / "world.json"
        path.write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")
        return path


def load_world(path) -> World:
    path = Path(path)
    desc = json.loads(path.read_text())
    vocab = Vocab(desc["vocab_size"], tuple(desc["labels"]))
    support = TabularSupport.from_record(vocab, desc["support"])
    gt = load_checkpoint(path.parent / desc["gt_reward"])
    ref = load_checkpoint(path.parent / desc["ref"])
    return World(support, np.array(desc["prompt_weights"]), gt, ref, desc["beta_star"])


def example1_world(R=1.0, beta_star=1.0) -> World:
    """One empty prompt, three single-token actions, uniform reference,
    hidden reward ``(0, 0, R)``."""
    vocab = Vocab(3, ("y1", "y2", "y3"))
    support = TabularSupport.single_prompt(vocab, [(0,), (1,), (2,)])
    gt = TabularReward(support, [0.0, 0.0, R], clamp=R)
    return World(support, np.array([1.0]), gt, TabularPolicy(support), beta_star)


def example1_demos() -> DemoSet:
    """The single demonstration ``{y3}`` of the three-action example."""
    return DemoSet((DemoPair((), (2,)),), Vocab(3, ("y1", "y2", "y3")))


def random_support(rng, n_prompts, n_conts, vocab_size=6, cont_len=2) -> TabularSupport:
    """Distinct single-token prompts, each with ``n_conts`` distinct random continuations."""
    vocab = Vocab(vocab_size)
    if n_prompts > vocab_size:
        raise ValueError("need at least one token per prompt")
    prompts = [(int(t),) for t in rng.permutation(vocab_size)[:n_prompts]]
    if n_conts > vocab_size ** cont_len:
        raise ValueError("not enough distinct continuations of that length")
    conts = []
    for _ in prompts:
        row = set()
        while len(row) < n_conts:
            row.add(tuple(int(t) for t in rng.integers(0, vocab_size, size=cont_len)))
        conts.append(sorted(row))
    return TabularSupport(vocab, prompts, conts)


def random_tabular_world(rng, n_prompts=3, n_conts=5, vocab_size=6, cont_len=2,
                         reward_scale=1.0, ref_scale=1.0, beta_star=1.0) -> World:
    support = random_support(rng, n_prompts, n_conts, vocab_size, cont_len)
    gt = TabularReward(support, reward_scale * rng.standard_normal(support.size))
    ref = TabularPolicy(support, ref_scale * rng.standard_normal(support.size))
    weights = rng.dirichlet(np.ones(n_prompts) * 2.0)
    return World(support, weights, gt, ref, beta_star)


def synth_demo(world: World, n: int, rng) -> DemoSet:
    """``n`` pairs with ``x ~ rho`` and ``y ~ expert(.|x)``."""
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    expert = world.expert
    items = []
    for _ in range(int(n)):
        x = world.draw_prompt(rng)
        items.append(DemoPair(x, expert.sample(x, rng)))
    return DemoSet(tuple(items), world.vocab)


def synth_pref(world: World, sampler, n: int, rng, max_retries=50, bt_noise=False) -> PrefSet:
    """``n`` preference triples labeled by the hidden reward.

    For each item a prompt is drawn, then two continuations from ``sampler``
    until they differ in reward. Distinct-but-tied draws are retried up to
    ``max_retries`` times before the item is skipped; if the sampler never
    yields two distinct continuations for a prompt, :class:`SynthesisError`
    names it. With ``bt_noise`` the label is drawn from a Bradley-Terry
    model of the hidden reward instead of taken deterministically.
    """
    if int(n) < 1:
        raise ValueError("n must be >= 1")
    gt = world.gt_reward
    items = []
    for _ in range(int(n)):
        x = world.draw_prompt(rng)
        distinct = False
        for _ in range(max_retries):
            a, b = sampler.sample(x, rng), sampler.sample(x, rng)
            if a == b:
                continue
            distinct = True
            ra, rb = gt.value(x, a), gt.value(x, b)
            if ra == rb:
                continue
            if bt_noise:
                a_wins = rng.random() < 1.0 / (1.0 + np.exp(rb - ra))
            else:
                a_wins = ra > rb
            items.append(PrefTriple(x, a, b) if a_wins else PrefTriple(x, b, a))
            break
        else:
            if not distinct:
                raise SynthesisError(
                    f"sampler produced no distinct pair for prompt {x} in {max_retries} tries")
    if not items:
        raise SynthesisError("every draw was a reward tie; no preference triples produced")
    return PrefSet(tuple(items), world.vocab)
