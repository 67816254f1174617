"""Brute-force ground truth for small tabular instances.

Nothing in this module calls the analytic gradient kernels it is used to
check: gradients come from central finite differences or from the
enumerated objective written out directly on arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax

from .domain import DemoSet
from .policies import TabularPolicy

MAX_PROMPTS = 4
MAX_CONTINUATIONS = 8


class OracleError(RuntimeError):
    pass


class OracleRefusal(OracleError):
    """The instance is too large to enumerate."""


def fd_gradient(objective, theta, eps=1e-5):
    """Central differences ``(f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        fu, fd = objective(up), objective(down)
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise OracleError(f"objective is not finite around coordinate {i}")
        grad[i] = (fu - fd) / (2 * eps)
    return grad


def solve_example1(R, beta):
    """Optimal induced policy of the three-action example with reward in [0, R].

    The demonstrated action gets reward R and the others 0, giving
    ``(1, 1, e^{R/beta}) / (2 + e^{R/beta})``.
    """
    if not R > 0:
        raise ValueError("R must be positive")
    if not beta > 0:
        raise ValueError("beta must be positive")
    return softmax(np.array([0.0, 0.0, R / beta]))


@dataclass
class TabularProblem:
    """ML-IRL instance in array form.

    ``prompt_weights[i]`` is rho(x_i); ``demo_probs`` holds the expert
    (demonstration) distribution per prompt in the flat cell layout, with an
    all-zero row for prompts that have no demonstrations.
    """

    ref: TabularPolicy
    prompt_weights: np.ndarray
    demo_probs: np.ndarray
    beta: float
    clamp: float = None

    @property
    def support(self):
        return self.ref.support

    @classmethod
    def from_demo_set(cls, ref, data: DemoSet, beta, clamp=None, prompt_weights=None):
        sup = ref.support
        d = np.zeros(sup.size)
        for w, it in zip(data.item_weights(), data.items):
            d[sup.cell(it.prompt, it.continuation)[2]] += w
        rho = np.array([d[sup.slice(i)].sum() for i in range(sup.n_prompts)])
        for i in range(sup.n_prompts):
            if rho[i] > 0:
                d[sup.slice(i)] /= rho[i]
        if prompt_weights is not None:
            rho = np.asarray(prompt_weights, dtype=np.float64)
        return cls(ref, rho, d, float(beta), clamp)

    def check_size(self):
        sup = self.support
        widest = max(len(r) for r in sup.continuations)
        if sup.n_prompts > MAX_PROMPTS or widest > MAX_CONTINUATIONS:
            raise OracleRefusal(
                f"instance has {sup.n_prompts} prompts x {widest} continuations; the oracle "
                f"enumerates at most {MAX_PROMPTS} x {MAX_CONTINUATIONS}")

    def _rows(self):
        sup = self.support
        return [sup.slice(i) for i in range(sup.n_prompts)]

    def objective(self, r):
        """``sum_x rho(x) [ sum_y d(y|x) r/beta - log sum_y ref(y|x) e^{r/beta} ]``."""
        log_ref = self.ref.log_prob_table()
        b = self.beta
        total = 0.0
        for i, sl in enumerate(self._rows()):
            if self.prompt_weights[i] == 0:
                continue
            total += self.prompt_weights[i] * (self.demo_probs[sl] @ r[sl] / b
                                               - logsumexp(log_ref[sl] + r[sl] / b))
        return float(total)

    def policy(self, r):
        log_ref = self.ref.log_prob_table()
        return np.concatenate([softmax(log_ref[sl] + r[sl] / self.beta) for sl in self._rows()])

    def gradient(self, r):
        """Exact enumerated gradient ``rho(x) (d(y|x) - pi_r(y|x)) / beta``."""
        pi = self.policy(r)
        g = np.zeros_like(r)
        for i, sl in enumerate(self._rows()):
            g[sl] = self.prompt_weights[i] * (self.demo_probs[sl] - pi[sl]) / self.beta
        return g

    def projected_gradient(self, r, step=1.0):
        """``(P(r + step g) - r) / step``; equals the gradient when unclamped."""
        g = self.gradient(r)
        if self.clamp is None:
            return g
        return (np.clip(r + step * g, 0.0, self.clamp) - r) / step


@dataclass
class StationaryPoint:
    params: np.ndarray
    policy: np.ndarray
    grad_norm: float


@dataclass
class StationaryResult:
    points: list = field(default_factory=list)
    diagnostic: str = ""

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]


def exact_stationary_points(problem: TabularProblem, n_starts=8, seed=0, tol=1e-9,
                            max_iter=5_000, dedup_tol=1e-6) -> StationaryResult:
    """Deterministic ascent on the enumerated objective from several starts.

    Each start runs bounded L-BFGS on the exact objective and gradient, then
    polishes with projected gradient steps of ``beta^2 / rho(x)`` per prompt
    (safe because the objective is concave and separates over prompts).
    A point counts as stationary when its projected-gradient norm is below
    ``tol``; survivors are deduplicated by distance between induced policies.
    """
    problem.check_size()
    rng = np.random.default_rng(seed)
    n = problem.support.size
    lo, hi = (0.0, problem.clamp) if problem.clamp is not None else (-2.0, 2.0)
    starts = [np.full(n, lo), np.full(n, hi)]
    starts += [rng.uniform(lo, hi, size=n) for _ in range(max(0, n_starts - 2))]
    sup = problem.support
    step = np.zeros(n)
    for i in range(sup.n_prompts):
        rho = problem.prompt_weights[i]
        step[sup.slice(i)] = problem.beta ** 2 / rho if rho > 0 else 0.0
    bounds = [(0.0, problem.clamp)] * n if problem.clamp is not None else None
    found = []
    best = math.inf
    for r0 in starts:
        res = minimize(lambda r: -problem.objective(r), r0, jac=lambda r: -problem.gradient(r),
                       method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iter, "gtol": 1e-14, "ftol": 1e-16})
        r = res.x
        pg = np.linalg.norm(problem.projected_gradient(r))
        for _ in range(max_iter):
            if pg < tol:
                break
            r = r + step * problem.gradient(r)
            if problem.clamp is not None:
                r = np.clip(r, 0.0, problem.clamp)
            pg = np.linalg.norm(problem.projected_gradient(r))
        best = min(best, pg)
        if pg >= tol:
            continue
        pi = problem.policy(r)
        if all(np.max(np.abs(pi - p.policy)) > dedup_tol for p in found):
            found.append(StationaryPoint(r, pi, float(pg)))
    diag = "" if found else (f"no start reached projected-gradient norm < {tol:g} "
                             f"(best {best:.3g}); the optimum may lie at infinity")
    return StationaryResult(found, diag)


@dataclass
class OracleReport:
    quantity: str
    oracle: object
    candidate: object
    max_abs_error: float
    threshold: float

    @property
    def passed(self):
        return bool(self.max_abs_error <= self.threshold)

    @property
    def verdict(self):
        return "pass" if self.passed else "fail"

    def to_record(self):
        def plain(v):
            arr = np.asarray(v, dtype=np.float64)
            return float(arr) if arr.ndim == 0 else [float(a) for a in arr.reshape(-1)]
        return {"quantity": self.quantity, "oracle": plain(self.oracle),
                "candidate": plain(self.candidate), "max_abs_error": float(self.max_abs_error),
                "threshold": self.threshold, "verdict": self.verdict}


def compare(quantity, oracle, candidate, threshold):
    err = float(np.max(np.abs(np.asarray(oracle, dtype=np.float64)
                              - np.asarray(candidate, dtype=np.float64))))
    if not math.isfinite(err):
        err = math.inf
    return OracleReport(quantity, oracle, candidate, err, threshold)


def format_table(reports) -> str:
    width = max([len(r.quantity) for r in reports] + [8])
    lines = [f"{'quantity':<{width}}  {'max_abs_error':>13}  {'threshold':>9}  verdict"]
    for r in reports:
        lines.append(f"{r.quantity:<{width}}  {r.max_abs_error:13.3e}  {r.threshold:9.1e}  "
                     f"{r.verdict}")
    return "\n".join(lines)


def report_lines(reports):
    return [json.dumps(r.to_record(), sort_keys=True) for r in reports]
