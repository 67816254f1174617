"""Value types and dataset containers for demonstration and preference data.

Prompts and continuations are plain tuples of token indices. A ``Vocab``
carries the token labels, which are used for display only.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Prompt = tuple
Continuation = tuple


class DatasetError(ValueError):
    """Raised when a dataset file or container is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Vocab:
    size: int
    labels: tuple = ()

    def __post_init__(self):
        if int(self.size) < 2:
            raise ValueError(f"vocab size must be >= 2, got {self.size}")
        labels = tuple(str(s) for s in self.labels) if self.labels else tuple(
            f"t{i}" for i in range(self.size))
        if len(labels) != self.size:
            raise ValueError(f"expected {self.size} labels, got {len(labels)}")
        if len(set(labels)) != len(labels):
            raise ValueError("vocab labels must be unique")
        object.__setattr__(self, "size", int(self.size))
        object.__setattr__(self, "labels", labels)

    def contains(self, tokens):
        return all(0 <= t < self.size for t in tokens)

    def render(self, tokens):
        return " ".join(self.labels[t] for t in tokens)


def as_tokens(seq) -> tuple:
    """Coerce a token sequence to a tuple of python ints."""
    out = []
    for t in seq:
        if isinstance(t, bool) or int(t) != t:
            raise TypeError(f"token {t!r} is not an integer")
        out.append(int(t))
    return tuple(out)


@dataclass(frozen=True)
class DemoPair:
    prompt: tuple
    continuation: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt", as_tokens(self.prompt))
        object.__setattr__(self, "continuation", as_tokens(self.continuation))


@dataclass(frozen=True)
class PrefTriple:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt", as_tokens(self.prompt))
        object.__setattr__(self, "chosen", as_tokens(self.chosen))
        object.__setattr__(self, "rejected", as_tokens(self.rejected))

    def swapped(self):
        return PrefTriple(self.prompt, self.rejected, self.chosen)


def _empirical_weights(prompts):
    counts = OrderedDict()
    for p in prompts:
        counts[p] = counts.get(p, 0) + 1
    n = len(prompts)
    return OrderedDict((p, c / n) for p, c in counts.items())


def _check_weights(weights, prompts):
    if weights is None:
        return _empirical_weights(prompts)
    weights = OrderedDict((as_tokens(p), float(w)) for p, w in dict(weights).items())
    if any(w < 0 for w in weights.values()):
        raise DatasetError("prompt weights must be nonnegative")
    if abs(sum(weights.values()) - 1.0) > 1e-12:
        raise DatasetError(f"prompt weights sum to {sum(weights.values())!r}, not 1")
    missing = set(prompts) - set(weights)
    if missing:
        raise DatasetError(f"prompt weights missing for {sorted(missing)[:3]}")
    return weights


@dataclass(frozen=True)
class DemoSet:
    """Demonstration pairs plus the empirical prompt distribution.

    ``prompt_weights`` defaults to the empirical frequency of each distinct
    prompt, so repeated prompts accumulate weight.
    """

    items: tuple
    vocab: Vocab
    prompt_weights: dict = field(default=None)
    max_len: int = None

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise DatasetError("empty dataset")
        for i, it in enumerate(items):
            if not isinstance(it, DemoPair):
                raise DatasetError(f"item {i} is not a DemoPair")
            if not self.vocab.contains(it.prompt) or not self.vocab.contains(it.continuation):
                raise DatasetError(f"item {i}: token out of vocab range [0, {self.vocab.size})")
            if len(it.continuation) < 1:
                raise DatasetError(f"item {i}: empty continuation")
            if self.max_len is not None and len(it.continuation) > self.max_len:
                raise DatasetError(f"item {i}: continuation longer than max_len={self.max_len}")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "prompt_weights",
                           _check_weights(self.prompt_weights, [it.prompt for it in items]))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    @property
    def prompts(self):
        return list(self.prompt_weights)

    def item_weights(self):
        """Per-item probability mass under rho(x) * empirical pi^E(y|x)."""
        counts = {}
        for it in self.items:
            counts[it.prompt] = counts.get(it.prompt, 0) + 1
        return np.array([self.prompt_weights[it.prompt] / counts[it.prompt]
                         for it in self.items])


@dataclass(frozen=True)
class PrefSet:
    """Preference triples; only ever used for evaluation.

    Unlike ``DemoSet`` the constructor does not enforce per-triple invariants,
    so malformed data can be loaded and inspected with ``validate_pref_set``.
    """

    items: tuple
    vocab: Vocab
    prompt_weights: dict = field(default=None)

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise DatasetError("empty dataset")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "prompt_weights",
                           _check_weights(self.prompt_weights, [it.prompt for it in items]))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def swapped(self):
        return PrefSet(tuple(t.swapped() for t in self.items), self.vocab,
                       dict(self.prompt_weights))


def validate_pref_set(prefs: PrefSet) -> list:
    """Return a list of human-readable invariant violations (empty if valid)."""
    violations = []
    V = prefs.vocab.size
    for i, t in enumerate(prefs.items):
        for name in ("prompt", "chosen", "rejected"):
            if not prefs.vocab.contains(getattr(t, name)):
                violations.append(f"token out of range [0, {V}) in {name} at index {i}")
        for name in ("chosen", "rejected"):
            if len(getattr(t, name)) < 1:
                violations.append(f"empty {name} at index {i}")
        if t.chosen == t.rejected:
            violations.append(f"degenerate pair at index {i}")
    return violations


# ---------------------------------------------------------------- file IO

def _vocab_record(vocab):
    return {"vocab_size": vocab.size, "labels": list(vocab.labels)}


def _read_records(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    header = None
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"malformed record ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise DatasetError("record is not an object", line=lineno)
            if "vocab_size" in rec:
                if header is not None or records:
                    raise DatasetError("vocab header must be the first record", line=lineno)
                header = rec
                continue
            records.append((lineno, rec))
    if not records:
        raise DatasetError("empty dataset")
    return header, records


def _field(rec, name, lineno):
    if name not in rec:
        raise DatasetError(f"missing field {name!r}", line=lineno)
    val = rec[name]
    if not isinstance(val, list):
        raise DatasetError(f"field {name!r} must be an integer array", line=lineno)
    try:
        return as_tokens(val)
    except (TypeError, ValueError):
        raise DatasetError(f"field {name!r} must be an integer array", line=lineno) from None


def _resolve_vocab(header, token_lists, vocab):
    if vocab is not None:
        return vocab
    if header is not None:
        return Vocab(int(header["vocab_size"]), tuple(header.get("labels") or ()))
    top = max((max(t) for toks in token_lists for t in [toks] if t), default=1)
    return Vocab(max(2, top + 1))


def _check_range(vocab, lineno, **fields):
    for name, toks in fields.items():
        bad = [t for t in toks if not 0 <= t < vocab.size]
        if bad:
            raise DatasetError(
                f"token {bad[0]} in {name!r} out of vocab range [0, {vocab.size})", line=lineno)


def load_demo_set(path, vocab: Vocab | None = None) -> DemoSet:
    """Read a line-delimited demonstration file.

    The optional first record ``{"vocab_size": n, "labels": [...]}`` fixes
    the vocabulary; otherwise it is inferred from the largest token seen.
    """
    header, records = _read_records(path)
    parsed = []
    for lineno, rec in records:
        parsed.append((lineno, _field(rec, "prompt", lineno), _field(rec, "continuation", lineno)))
    vocab = _resolve_vocab(header, [p + c for _, p, c in parsed], vocab)
    items = []
    for lineno, p, c in parsed:
        _check_range(vocab, lineno, prompt=p, continuation=c)
        if not c:
            raise DatasetError("empty continuation", line=lineno)
        items.append(DemoPair(p, c))
    return DemoSet(tuple(items), vocab)


def load_pref_set(path, vocab: Vocab | None = None) -> PrefSet:
    header, records = _read_records(path)
    parsed = []
    for lineno, rec in records:
        parsed.append((lineno, _field(rec, "prompt", lineno), _field(rec, "chosen", lineno),
                       _field(rec, "rejected", lineno)))
    vocab = _resolve_vocab(header, [p + c + r for _, p, c, r in parsed], vocab)
    items = []
    for lineno, p, c, r in parsed:
        _check_range(vocab, lineno, prompt=p, chosen=c, rejected=r)
        items.append(PrefTriple(p, c, r))
    return PrefSet(tuple(items), vocab)


def _write_lines(path, lines):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, separators=(", ", ": ")) + "\n")


def save_demo_set(demos: DemoSet, path):
    _write_lines(path, [_vocab_record(demos.vocab)] + [
        {"prompt": list(it.prompt), "continuation": list(it.continuation)} for it in demos])


def save_pref_set(prefs: PrefSet, path):
    _write_lines(path, [_vocab_record(prefs.vocab)] + [
        {"prompt": list(t.prompt), "chosen": list(t.chosen), "rejected": list(t.rejected)}
        for t in prefs])


def demo_set_from_pairs(pairs: Iterable, vocab: Vocab, **kwargs) -> DemoSet:
    """Build a DemoSet from ``(prompt, continuation)`` tuples."""
    return DemoSet(tuple(p if isinstance(p, DemoPair) else DemoPair(*p) for p in pairs),
                   vocab, **kwargs)


def chosen_only(prefs: PrefSet) -> DemoSet:
    """Keep only the preferred continuation of every triple."""
    return DemoSet(tuple(DemoPair(t.prompt, t.chosen) for t in prefs), prefs.vocab)


def split_prefs(prefs: PrefSet, n_train: int, rng) -> tuple:
    """Shuffle ``prefs`` with ``rng`` and split off the first ``n_train`` triples."""
    order = rng.permutation(len(prefs))
    items = [prefs.items[i] for i in order]
    return (PrefSet(tuple(items[:n_train]), prefs.vocab),
            PrefSet(tuple(items[n_train:]), prefs.vocab))


def unique_prompts(prompts: Sequence) -> list:
    return list(OrderedDict.fromkeys(as_tokens(p) for p in prompts))
