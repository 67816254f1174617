"""Evaluation metrics: log-prob gap, win rate, Bradley-Terry diagnostic and
convergence statistics of a training trace."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .domain import PrefSet
from .policies import make_rng
from .rewards import check_beta


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class GapReport:
    gaps: np.ndarray
    mean: float
    stderr: float

    def summary(self):
        return {"metric": "log_prob_gap", "n": int(len(self.gaps)), "mean": self.mean,
                "stderr": self.stderr}

    def to_csv(self, path):
        _write_csv(path, ["index", "gap"], [[i, repr(float(g))] for i, g in enumerate(self.gaps)])


def _stderr(values):
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def log_prob_gap(policy, prefs: PrefSet) -> GapReport:
    """Per-triple ``log pi(chosen|x) - log pi(rejected|x)``."""
    gaps = np.array([policy.log_prob(t.prompt, t.chosen) - policy.log_prob(t.prompt, t.rejected)
                     for t in prefs])
    return GapReport(gaps, float(np.mean(gaps)), _stderr(gaps))


@dataclass
class WinRateReport:
    wins: int
    ties: int
    total: int
    rows: list = field(default_factory=list, repr=False)

    @property
    def losses(self):
        return self.total - self.wins - self.ties

    @property
    def rate(self):
        return self.wins / self.total if self.total else 0.0

    def summary(self):
        return {"metric": "win_rate", "wins": self.wins, "ties": self.ties,
                "losses": self.losses, "total": self.total, "rate": self.rate}

    def to_csv(self, path):
        _write_csv(path, ["prompt", "rep", "score_a", "score_b", "outcome"],
                   [[" ".join(map(str, x)), rep, repr(sa), repr(sb), o]
                    for x, rep, sa, sb, o in self.rows])


def win_rate(policy_a, policy_b, scorer, prompts, rng, n_per_prompt=1,
             coupling="common") -> WinRateReport:
    """Fraction of paired generations where ``policy_a`` out-scores ``policy_b``.

    For every (prompt, repetition) a child seed is drawn from ``rng``. With
    ``coupling="common"`` both sides get their own generator built from that
    seed with identical state (common random numbers: identical policies tie
    everywhere and swapping the arguments swaps wins and losses). With
    ``"independent"`` the two sides use different streams.
    """
    if int(n_per_prompt) < 1:
        raise ValueError("n_per_prompt must be >= 1")
    if coupling not in ("common", "independent"):
        raise ValueError(f"unknown coupling {coupling!r}")
    wins = ties = total = 0
    rows = []
    for x in prompts:
        x = tuple(x)
        for rep in range(int(n_per_prompt)):
            seed = int(rng.integers(0, 2 ** 63 - 1))
            ra = make_rng(seed, 0)
            rb = make_rng(seed, 0 if coupling == "common" else 1)
            sa = scorer.value(x, policy_a.sample(x, ra))
            sb = scorer.value(x, policy_b.sample(x, rb))
            if sa > sb:
                wins += 1
                outcome = "win"
            elif sa == sb:
                ties += 1
                outcome = "tie"
            else:
                outcome = "loss"
            total += 1
            rows.append((x, rep, sa, sb, outcome))
    return WinRateReport(wins, ties, total, rows)


class ImplicitReward:
    """Adapter exposing ``beta * log(pi / ref)`` through the reward interface."""

    def __init__(self, policy, ref, beta):
        self.policy = policy
        self.ref = ref
        self.beta = check_beta(beta)

    def value(self, x, y):
        return self.beta * (self.policy.log_prob(x, y) - self.ref.log_prob(x, y))


@dataclass
class BTReport:
    log_likelihood: float
    accuracy: float
    n: int
    margins: np.ndarray = field(default=None, repr=False)

    def summary(self):
        return {"metric": "bt_diagnostic", "n": self.n, "log_likelihood": self.log_likelihood,
                "accuracy": self.accuracy}

    def to_csv(self, path):
        _write_csv(path, ["index", "margin", "correct"],
                   [[i, repr(float(m)), 1.0 if m > 0 else (0.5 if m == 0 else 0.0)]
                    for i, m in enumerate(self.margins)])


def bt_diagnostic(reward, prefs: PrefSet) -> BTReport:
    """Mean ``log sigmoid(r(x, y_w) - r(x, y_l))`` and pairwise accuracy.

    A tie in reward counts as half a correct classification.
    """
    margins = np.array([reward.value(t.prompt, t.chosen) - reward.value(t.prompt, t.rejected)
                        for t in prefs])
    loglik = -np.logaddexp(0.0, -margins)
    acc = np.where(margins > 0, 1.0, np.where(margins == 0, 0.5, 0.0))
    return BTReport(float(np.mean(loglik)), float(np.mean(acc)), len(margins), margins)


@dataclass
class ConvergenceStats:
    min_grad_norm: float
    argmin_step: int
    per_outer_means: dict

    def summary(self):
        return {"metric": "convergence_stats", "min_grad_norm": self.min_grad_norm,
                "argmin_step": self.argmin_step}

    def to_csv(self, path):
        _write_csv(path, ["t", "mean_grad_norm"],
                   [[t, repr(v)] for t, v in sorted(self.per_outer_means.items())])


def convergence_stats(trace, grad_norms=None) -> ConvergenceStats:
    """Minimum gradient norm over iterates (first occurrence) and per-outer means.

    ``grad_norms`` overrides the recorded norms, e.g. with exact gradients
    of the iterates computed by the oracle.
    """
    norms = trace.grad_norms if grad_norms is None else np.asarray(grad_norms, dtype=np.float64)
    if len(norms) == 0:
        raise ValueError("empty trace")
    if len(norms) != len(trace.records):
        raise ValueError("one gradient norm per trace record is required")
    idx = int(np.argmin(norms))
    outer = {}
    for rec, v in zip(trace.records, norms):
        outer.setdefault(rec.t, []).append(float(v))
    means = {t: float(np.mean(v)) for t, v in outer.items()}
    return ConvergenceStats(float(norms[idx]), trace.records[idx].step, means)
