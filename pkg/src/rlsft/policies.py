"""Exact categorical policies pi(y|x; theta) with hand-derived score functions.

Two families share one interface (``log_prob``, ``grad_log_prob``,
``sample``, ``with_params``):

* :class:`TabularPolicy` -- one softmax row per prompt over an enumerable
  list of continuations. Logits are ``base + scale * params`` so the same
  class can hold a directly parameterized policy (``base = 0``, ``scale = 1``)
  or the reward-induced policy ``pi_ref * exp(r / beta)`` (``base = log pi_ref``,
  ``scale = 1 / beta``, ``params = r``).
* :class:`AutoregressivePolicy` -- a log-linear next-token model whose
  features are one-hot ``(last c tokens, position bucket)`` contexts.

Parameters are flat float64 numpy arrays throughout.
"""

from __future__ import annotations

from functools import cached_property
from itertools import product

import numpy as np
from scipy.special import log_softmax, softmax

from .domain import Vocab, as_tokens


class DomainError(ValueError):
    """An input lies outside the domain a model is defined on."""


def make_rng(seed, *stream):
    """Return a numpy Generator for ``seed`` and an optional stream path.

    ``make_rng(s, 3, 1)`` and ``make_rng(s, 3, 2)`` are independent streams;
    the same arguments always give the same draws.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])


def _draw_index(probs, rng):
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)


def _as_base(values, n):
    # structural zeros (-inf) are allowed in the fixed offset, never in params
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape[0] != n:
        raise ValueError(f"expected {n} base offsets, got {arr.shape[0]}")
    if np.any(np.isnan(arr)) or np.any(np.isposinf(arr)):
        raise ValueError("base offsets must be finite or -inf")
    return arr


def _as_params(values, n):
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape[0] != n:
        raise ValueError(f"expected {n} parameters, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameters must be finite")
    return arr


# ------------------------------------------------------------------ tabular


class TabularSupport:
    """Prompts and, for each prompt, the enumerable list of continuations."""

    def __init__(self, vocab: Vocab, prompts, continuations):
        prompts = tuple(as_tokens(p) for p in prompts)
        conts = tuple(tuple(as_tokens(y) for y in row) for row in continuations)
        if len(prompts) != len(conts):
            raise ValueError("one continuation list per prompt is required")
        if len(set(prompts)) != len(prompts):
            raise ValueError("duplicate prompt in support")
        for p, row in zip(prompts, conts):
            if not row:
                raise ValueError(f"prompt {p} has no continuations")
            if len(set(row)) != len(row):
                raise ValueError(f"duplicate continuation for prompt {p}")
            if not vocab.contains(p) or not all(vocab.contains(y) and y for y in row):
                raise ValueError(f"support for prompt {p} is not valid against the vocab")
        self.vocab = vocab
        self.prompts = prompts
        self.continuations = conts
        sizes = np.array([len(r) for r in conts])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._row = {p: i for i, p in enumerate(prompts)}
        self._col = [{y: j for j, y in enumerate(row)} for row in conts]

    @property
    def size(self):
        return int(self.offsets[-1])

    @property
    def n_prompts(self):
        return len(self.prompts)

    def row(self, x):
        try:
            return self._row[tuple(x)]
        except KeyError:
            raise DomainError(f"prompt {tuple(x)} is not in the tabular support") from None

    def slice(self, i):
        return slice(self.offsets[i], self.offsets[i + 1])

    def cell(self, x, y):
        i = self.row(x)
        try:
            j = self._col[i][tuple(y)]
        except KeyError:
            raise DomainError(
                f"continuation {tuple(y)} is not enumerable for prompt {tuple(x)}") from None
        return i, j, int(self.offsets[i] + j)

    def column(self, i, y):
        return self._col[i].get(tuple(y))

    def __eq__(self, other):
        return (isinstance(other, TabularSupport) and self.vocab == other.vocab
                and self.prompts == other.prompts and self.continuations == other.continuations)

    def __hash__(self):
        return hash((self.vocab, self.prompts, self.continuations))

    def to_record(self):
        return {"prompts": [list(p) for p in self.prompts],
                "continuations": [[list(y) for y in row] for row in self.continuations]}

    @classmethod
    def from_record(cls, vocab, rec):
        return cls(vocab, rec["prompts"], rec["continuations"])

    @classmethod
    def single_prompt(cls, vocab, continuations, prompt=()):
        return cls(vocab, [prompt], [continuations])


class TabularPolicy:
    """Softmax policy over an enumerable continuation set per prompt."""

    family = "tabular_policy"

    def __init__(self, support: TabularSupport, params=None, base=None, scale=1.0):
        self.support = support
        n = support.size
        self.params = np.zeros(n) if params is None else _as_params(params, n)
        self.base = np.zeros(n) if base is None else _as_base(base, n)
        self.scale = float(scale)
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError("scale must be a positive finite number")
        for i in range(support.n_prompts):
            if np.all(np.isneginf(self.base[support.slice(i)])):
                raise ValueError(f"prompt {support.prompts[i]} has no continuation with mass")
        self.params.setflags(write=False)
        self.base.setflags(write=False)

    @property
    def vocab(self):
        return self.support.vocab

    @property
    def n_params(self):
        return self.support.size

    def with_params(self, params):
        return TabularPolicy(self.support, params, self.base, self.scale)

    def logits(self):
        return self.base + self.scale * self.params

    @cached_property
    def _log_table(self):
        z = self.logits()
        table = np.concatenate([log_softmax(z[self.support.slice(i)])
                                for i in range(self.support.n_prompts)])
        table.setflags(write=False)
        return table

    def row_log_probs(self, i):
        return self._log_table[self.support.slice(i)]

    def row_probs(self, i):
        return np.exp(self._log_table[self.support.slice(i)])

    def log_prob_table(self):
        """Flat array of log pi(y|x) aligned with the parameter layout."""
        return self._log_table.copy()

    def probs(self, x):
        """(continuations, probabilities) for prompt ``x``."""
        i = self.support.row(x)
        return self.support.continuations[i], self.row_probs(i)

    def log_prob(self, x, y):
        i, j, _ = self.support.cell(x, y)
        return float(self.row_log_probs(i)[j])

    def grad_log_prob(self, x, y):
        i, j, _ = self.support.cell(x, y)
        g = np.zeros(self.n_params)
        sl = self.support.slice(i)
        row = -self.row_probs(i)
        row[j] += 1.0
        g[sl] = self.scale * row
        return g

    def sample(self, x, rng):
        i = self.support.row(x)
        return self.support.continuations[i][_draw_index(self.row_probs(i), rng)]

    def __repr__(self):
        return (f"TabularPolicy(prompts={self.support.n_prompts}, n_params={self.n_params}, "
                f"scale={self.scale:g})")


# ----------------------------------------------------------- autoregressive


class AutoregressivePolicy:
    """Log-linear next-token model ``pi(v | ctx) = softmax_v(W[f(ctx), v])``.

    ``f(ctx)`` is a single one-hot feature built from the last ``context``
    tokens of ``prompt + y_<j`` (left-padded with a begin marker) and the
    position bucket ``min(j, n_buckets - 1)``. With ``context=1`` and
    ``n_buckets=1`` this is a bigram model. Generation stops after
    ``end_token`` or at ``max_len`` tokens; ``log_prob`` scores exactly the
    supplied tokens, so continuations need not end with ``end_token``.
    """

    family = "autoregressive_policy"

    def __init__(self, vocab: Vocab, max_len, params=None, end_token=None, context=1,
                 n_buckets=1):
        if int(max_len) < 1 or int(context) < 1 or int(n_buckets) < 1:
            raise ValueError("max_len, context and n_buckets must be >= 1")
        if end_token is not None and not 0 <= int(end_token) < vocab.size:
            raise ValueError("end_token must lie in the vocab")
        self.vocab = vocab
        self.max_len = int(max_len)
        self.end_token = None if end_token is None else int(end_token)
        self.context = int(context)
        self.n_buckets = int(n_buckets)
        self.n_contexts = (vocab.size + 1) ** self.context
        self.n_features = self.n_contexts * self.n_buckets
        n = self.n_features * vocab.size
        self.params = np.zeros(n) if params is None else _as_params(params, n)
        self.params.setflags(write=False)

    @property
    def n_params(self):
        return self.params.shape[0]

    def config(self):
        return {"max_len": self.max_len, "end_token": self.end_token,
                "context": self.context, "n_buckets": self.n_buckets}

    def with_params(self, params):
        return AutoregressivePolicy(self.vocab, params=params, **self.config())

    @property
    def weights(self):
        return self.params.reshape(self.n_features, self.vocab.size)

    def feature(self, history, position):
        """Row index of the one-hot feature for a generation context."""
        bos = self.vocab.size
        window = list(history[-self.context:])
        window = [bos] * (self.context - len(window)) + window
        code = 0
        for t in window:
            code = code * (bos + 1) + t
        return code * self.n_buckets + min(position, self.n_buckets - 1)

    def _check(self, x, y):
        if not self.vocab.contains(x) or not self.vocab.contains(y):
            raise DomainError("token out of vocab range")
        if not 1 <= len(y) <= self.max_len:
            raise DomainError(f"continuation length {len(y)} outside [1, {self.max_len}]")

    def _rows(self, x, y):
        hist = list(x)
        rows = []
        for j, tok in enumerate(y):
            rows.append(self.feature(hist, j))
            hist.append(tok)
        return rows

    def next_token_log_probs(self, history, position):
        return log_softmax(self.weights[self.feature(list(history), position)])

    def log_prob(self, x, y):
        x, y = tuple(x), tuple(y)
        self._check(x, y)
        W = self.weights
        total = 0.0
        for row, tok in zip(self._rows(x, y), y):
            total += float(log_softmax(W[row])[tok])
        return total

    def grad_log_prob(self, x, y):
        x, y = tuple(x), tuple(y)
        self._check(x, y)
        W = self.weights
        G = np.zeros_like(W)
        for row, tok in zip(self._rows(x, y), y):
            G[row] -= softmax(W[row])
            G[row, tok] += 1.0
        return G.reshape(-1)

    def sample(self, x, rng):
        hist = list(x)
        W = self.weights
        out = []
        for j in range(self.max_len):
            tok = _draw_index(softmax(W[self.feature(hist, j)]), rng)
            out.append(tok)
            hist.append(tok)
            if tok == self.end_token:
                break
        return tuple(out)

    def enumerate_continuations(self, limit=100_000):
        """All complete generations (ending in ``end_token`` or at ``max_len``)."""
        V = self.vocab.size
        out = []
        for length in range(1, self.max_len + 1):
            for y in product(range(V), repeat=length):
                if self.end_token is not None and self.end_token in y[:-1]:
                    continue
                if length < self.max_len and y[-1] != self.end_token:
                    continue
                out.append(y)
                if len(out) > limit:
                    raise DomainError(f"more than {limit} continuations to enumerate")
        return out

    def __repr__(self):
        return (f"AutoregressivePolicy(V={self.vocab.size}, max_len={self.max_len}, "
                f"context={self.context}, n_buckets={self.n_buckets})")


def log_prob(policy, x, y):
    return policy.log_prob(tuple(x), tuple(y))


def grad_log_prob(policy, x, y):
    return policy.grad_log_prob(tuple(x), tuple(y))


def sample(policy, x, rng):
    return policy.sample(tuple(x), rng)


def uniform_tabular(support):
    return TabularPolicy(support)


def same_family(a, b):
    if isinstance(a, TabularPolicy) and isinstance(b, TabularPolicy):
        return a.support == b.support
    if isinstance(a, AutoregressivePolicy) and isinstance(b, AutoregressivePolicy):
        return a.vocab == b.vocab
    return False

