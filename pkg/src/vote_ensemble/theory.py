"""Computable pieces of the tail theory for model-level voting.

Bernoulli KL divergence and its lower bounds, the explicit four-term tail
bound for majority-vote ensembling, and Monte-Carlo or exact estimators of the
quantities that feed it (model output probabilities, their gap, and the
uniform deviation tail of empirical losses).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .core import InvalidArgument, ModelKey, SampleBatch

__all__ = [
    "kl_bernoulli",
    "kl_ratio_lower_bound",
    "kl_balanced_lower_bound",
    "BoundInputs",
    "MoveBound",
    "move_bound",
    "lp_bound_inputs",
    "PkTable",
    "estimate_pk",
    "exact_phat_enumeration",
    "eta_from_pk",
    "TailEstimate",
    "estimate_Tk",
    "regression_deviation_bound",
    "regression_base_tail_bound",
]


def _xlogy(x: float, y: float) -> float:
    return 0.0 if x == 0 else x * math.log(y)


def kl_bernoulli(p: float, q: float) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(q).

    Uses 0 ln 0 = 0. When q is 0 or 1 and p != q the divergence is infinite
    and ``math.inf`` is returned, so ``exp(-c * kl)`` evaluates to 0.
    """
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0):
        raise InvalidArgument(f"probabilities must lie in [0, 1], got p={p!r}, q={q!r}")
    if q in (0.0, 1.0):
        return 0.0 if p == q else math.inf
    value = _xlogy(p, p / q) + _xlogy(1.0 - p, (1.0 - p) / (1.0 - q))
    return max(value, 0.0)


def kl_ratio_lower_bound(p: float, q: float) -> float:
    """p ln(p/q) + q - p, a lower bound on ``kl_bernoulli(p, q)``."""
    return _xlogy(p, p / q) + q - p


def kl_balanced_lower_bound(q: float, gamma: float) -> float:
    """-ln(2 (q(1-q))^gamma); bounds ``kl_bernoulli(p, q)`` from below for p in [gamma, 1-gamma]."""
    return -math.log(2.0 * (q * (1.0 - q)) ** gamma)


# ---------------------------------------------------------------------------
# Majority-vote tail bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundInputs:
    p_max: float
    eta: float
    n: int
    k: int
    B: int
    cardinality: int

    def __post_init__(self):
        if not 0.0 < self.p_max <= 1.0:
            raise InvalidArgument(f"p_max must lie in (0, 1], got {self.p_max!r}")
        if not 0.0 < self.eta <= self.p_max:
            raise InvalidArgument(f"eta must lie in (0, p_max], got eta={self.eta!r}, p_max={self.p_max!r}")
        for name in ("n", "k", "B", "cardinality"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be a positive integer")
        if self.k > self.n:
            raise InvalidArgument(f"k must not exceed n, got k={self.k}, n={self.n}")


@dataclass(frozen=True)
class MoveBound:
    """The four bracketed terms (second one already doubled) and their total."""

    terms: tuple[float, float, float, float]
    cardinality: int

    @property
    def total(self) -> float:
        return self.cardinality * sum(self.terms)


def _exp_neg(x: float) -> float:
    return 0.0 if x == math.inf else math.exp(-x)


def move_bound(inputs: BoundInputs) -> MoveBound:
    """Finite-sample bound on P(excess risk > delta) for majority-vote ensembling."""
    p, eta, B = inputs.p_max, inputs.eta, inputs.B
    rate = inputs.n / (2.0 * inputs.k)

    def kl_term(a, b):
        d = kl_bernoulli(min(max(a, 0.0), 1.0), b)
        return math.inf if d == math.inf else rate * d

    t1 = _exp_neg(kl_term(p - 0.75 * eta, p - eta))
    t2 = 2.0 * _exp_neg(kl_term(p - 0.25 * eta, p))
    t3 = math.exp(-(B / 24.0) * eta**2 / (min(p, 1.0 - p) + 0.75 * eta))
    if p + 0.25 * eta <= 1.0:
        t4 = _exp_neg(kl_term(p + 0.25 * eta, p) + (B / 24.0) * eta**2 / (1.0 - p + 0.25 * eta))
    else:
        t4 = 0.0
    return MoveBound((t1, t2, t3, t4), inputs.cardinality)


def lp_bound_inputs(q_k: float, n: int, k: int, B: int) -> BoundInputs:
    """Bound inputs for the stochastic LP: p_max = q_k, eta = 2 q_k - 1, two models."""
    return BoundInputs(p_max=q_k, eta=2.0 * q_k - 1.0, n=n, k=k, B=B, cardinality=2)


# ---------------------------------------------------------------------------
# Output probabilities of the base learner
# ---------------------------------------------------------------------------


@dataclass
class PkTable:
    """Estimated probability of each model being output by the base learner."""

    probs: dict[ModelKey, float]
    trials: int
    k: int
    models: dict[ModelKey, Any] = field(default_factory=dict)
    exact: bool = False

    def se(self, key: ModelKey) -> float:
        if self.exact:
            return 0.0
        p = self.probs.get(key, 0.0)
        return math.sqrt(p * (1.0 - p) / self.trials)

    def get(self, theta) -> float:
        return self.probs.get(ModelKey.of(theta), 0.0)

    @property
    def p_max(self) -> float:
        return max(self.probs.values())

    def rows(self) -> list[tuple[ModelKey, float, float]]:
        """(key, probability, standard error) by descending probability, then key."""
        order = sorted(self.probs, key=lambda key: (-self.probs[key], key))
        return [(key, self.probs[key], self.se(key)) for key in order]


def _tabulate(thetas: Iterable, trials: int, k: int, exact: bool) -> PkTable:
    counts: dict[ModelKey, int] = {}
    models: dict[ModelKey, Any] = {}
    for theta in thetas:
        key = ModelKey.of(theta)
        counts[key] = counts.get(key, 0) + 1
        models.setdefault(key, theta)
    return PkTable({key: c / trials for key, c in counts.items()}, trials, k, models, exact)


def estimate_pk(base: Callable, sampler: Callable[[int, np.random.Generator], SampleBatch], k: int,
                trials: int, rng: np.random.Generator) -> PkTable:
    """Train ``base`` on ``trials`` fresh samples of size ``k`` and tabulate its outputs."""
    if trials < 1:
        raise InvalidArgument(f"trials must be >= 1, got {trials}")
    data_rng, learner_rng = rng.spawn(2)
    thetas = (base(sampler(k, data_rng), learner_rng) for _ in range(trials))
    return _tabulate(thetas, trials, k, exact=False)


def exact_phat_enumeration(base: Callable, data: SampleBatch, k: int, budget: int = 10**6) -> PkTable:
    """Exact output frequencies of a deterministic learner over all k-subsets of ``data``.

    This is the infinite-ensemble limit of the majority-vote tally.
    """
    n = len(data)
    if not 1 <= k <= n:
        raise InvalidArgument(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    total = math.comb(n, k)
    if total > budget:
        raise InvalidArgument(f"C({n}, {k}) = {total} subsets exceeds the budget of {budget}")
    thetas = (base(data.take(list(s)), None) for s in itertools.combinations(range(n), k))
    return _tabulate(thetas, total, k, exact=True)


def eta_from_pk(table: PkTable, delta_optimal: Iterable) -> float:
    """Largest probability minus the largest probability among non-delta-optimal models.

    ``delta_optimal`` holds models or ModelKeys; the second maximum is 0 when
    every tabulated model is delta-optimal.
    """
    good = {d if isinstance(d, ModelKey) else ModelKey.of(d) for d in delta_optimal}
    if not good:
        raise InvalidArgument("delta_optimal must not be empty")
    outside = [p for key, p in table.probs.items() if key not in good]
    return table.p_max - (max(outside) if outside else 0.0)


# ---------------------------------------------------------------------------
# Uniform deviation tail of empirical losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailEstimate:
    p: float
    se: float
    trials: int


def estimate_Tk(loss: Callable, models: Sequence, true_risks: Sequence[float], sampler: Callable, k: int,
                t: float, trials: int, rng: np.random.Generator) -> TailEstimate:
    """Frequency of max_theta |mean loss - true risk| > t over fresh size-k samples."""
    if trials < 1:
        raise InvalidArgument(f"trials must be >= 1, got {trials}")
    if len(models) != len(true_risks) or not models:
        raise InvalidArgument("need one true risk per model and at least one model")
    risks = np.asarray(true_risks, dtype=float)
    hits = 0
    for _ in range(trials):
        batch = sampler(k, rng)
        dev = max(abs(float(np.mean(loss(theta, batch))) - r) for theta, r in zip(models, risks))
        hits += dev > t
    p = hits / trials
    return TailEstimate(p, math.sqrt(p * (1.0 - p) / trials), trials)


def regression_deviation_bound(k: int, t: float, sigma2: float, mu4: float) -> float:
    """Markov-type bound (8 mu4 + 32 sigma^2) / (k t^2) on the regression deviation tail."""
    return (8.0 * mu4 + 32.0 * sigma2) / (k * t * t)


def regression_base_tail_bound(k: int, delta: float, sigma2: float) -> float:
    """sigma^2 / (k delta), bounding P(theta_LS^2 > delta) for k samples."""
    return sigma2 / (k * delta)
