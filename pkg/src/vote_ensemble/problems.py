"""Desk-scale stochastic programs with heavy-tailed data.

Every problem exposes the same surface: ``sample`` draws a data batch,
``fit`` is the sample-average-approximation (SAA) learner, ``loss`` returns
per-observation losses, ``risk`` is the population objective. Maximization
problems are negated so that every ``risk`` is a cost to minimize.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import ClassVar, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import InvalidArgument, SampleBatch

__all__ = [
    "pareto",
    "pareto_moment",
    "pareto_difference_moments",
    "gen_lp_example",
    "lp_example_saa",
    "lp_example_true_risk",
    "gen_regression",
    "regression_ls",
    "resource_alloc_saa",
    "resource_alloc_true_risk",
    "max_weight_assignment",
    "matching_saa",
    "project_simplex",
    "simplex_qp_pgd",
    "simplex_qp_exact",
    "portfolio_saa",
    "QPResult",
    "Problem",
    "Constant",
    "LpExample",
    "Regression",
    "ResourceAllocation",
    "Matching",
    "Portfolio",
    "PROBLEMS",
    "make_problem",
]


# ---------------------------------------------------------------------------
# Pareto helpers
# ---------------------------------------------------------------------------


def _check_shape(alpha: float, lower: float = 1.0):
    if not alpha > lower:
        raise InvalidArgument(f"Pareto shape must be > {lower:g}, got {alpha!r}")


def pareto(alpha, size, rng: np.random.Generator) -> np.ndarray:
    """Pareto(alpha) draws with scale 1, supported on [1, inf)."""
    # numpy's pareto is the Lomax law, i.e. the classical Pareto shifted to 0.
    return 1.0 + rng.pareto(alpha, size)


def pareto_moment(alpha: float, order: int) -> float:
    """E[X**order] for X ~ Pareto(alpha) with scale 1 (inf when it diverges)."""
    return alpha / (alpha - order) if alpha > order else np.inf


def pareto_difference_moments(alpha: float) -> tuple[float, float]:
    """(E[D^2], E[D^4]) for D = X1 - X2 with X1, X2 iid Pareto(alpha)."""
    m1, m2, m3, m4 = (pareto_moment(alpha, j) for j in (1, 2, 3, 4))
    var = m2 - m1**2 if np.isfinite(m2) else np.inf
    if not np.isfinite(m4):
        return 2 * var, np.inf
    central4 = m4 - 4 * m1 * m3 + 6 * m1**2 * m2 - 3 * m1**4
    return 2 * var, 2 * central4 + 6 * var**2


# ---------------------------------------------------------------------------
# Stochastic LP:  min_{theta in [0,1]} E[z theta]
# ---------------------------------------------------------------------------


def gen_lp_example(n: int, alpha: float, rng: np.random.Generator) -> SampleBatch:
    """z = 1 + (e1 - e2) with e1, e2 iid Pareto(alpha): symmetric about its mean 1."""
    _check_shape(alpha)
    return SampleBatch(1.0 + (pareto(alpha, n, rng) - pareto(alpha, n, rng)))


def lp_example_saa(batch: SampleBatch, rng=None) -> int:
    """Minimizer of mean(z) * theta over [0, 1]; a zero mean resolves to 0."""
    return 1 if batch.items.mean() < 0 else 0


def lp_example_true_risk(theta) -> float:
    if theta not in (0, 1):
        raise InvalidArgument(f"the LP SAA only outputs 0 or 1, got {theta!r}")
    return float(theta)


# ---------------------------------------------------------------------------
# Linear regression with x in {-1, 1} and true coefficient 0
# ---------------------------------------------------------------------------


def gen_regression(n: int, alpha: float, rng: np.random.Generator) -> SampleBatch:
    """Rows (x, y) with x uniform on {-1, 1} and y = Pareto(alpha) - Pareto(alpha)."""
    _check_shape(alpha)
    x = rng.choice(np.array([-1.0, 1.0]), size=n)
    y = pareto(alpha, n, rng) - pareto(alpha, n, rng)
    return SampleBatch(np.column_stack([x, y]))


def regression_ls(batch: SampleBatch, rng=None) -> float:
    """Least squares projected on [-1, 1]; sum x_i^2 = n because x_i = +-1."""
    x, y = batch.items[:, 0], batch.items[:, 1]
    return float(np.clip(np.mean(x * y), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Resource allocation
# ---------------------------------------------------------------------------


def _all_selections(m: int) -> np.ndarray:
    """Every theta in {0,1}^m, in lexicographic order."""
    return np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.int64).reshape(-1, m)


def _alloc_objective(W: np.ndarray, thetas: np.ndarray, rewards, cost, q) -> np.ndarray:
    usage = W @ thetas.T
    penalty = np.maximum(usage - q, 0.0).mean(axis=0)
    return thetas @ np.asarray(rewards, dtype=float) - cost * penalty


def resource_alloc_saa(batch: SampleBatch, params: "ResourceAllocation", rng=None) -> np.ndarray:
    """Exhaustive search over all 2^m selections of the empirical objective."""
    m = params.m
    if m > 20:
        raise InvalidArgument(f"enumeration supports m <= 20, got {m}")
    W = batch.items
    best_value, best = -np.inf, None
    # Chunks keep the usage matrix bounded; order stays lexicographic.
    thetas = _all_selections(m) if m <= 12 else None
    chunks = [thetas] if thetas is not None else _selection_chunks(m, 4096)
    for chunk in chunks:
        values = _alloc_objective(W, chunk, params.rewards, params.cost, params.q)
        i = int(np.argmax(values))
        if values[i] > best_value:
            best_value, best = values[i], chunk[i]
    return best.copy()


def _selection_chunks(m: int, size: int):
    it = itertools.product((0, 1), repeat=m)
    while True:
        chunk = list(itertools.islice(it, size))
        if not chunk:
            return
        yield np.array(chunk, dtype=np.int64)


@lru_cache(maxsize=16)
def _penalty_table(rewards, cost, q, shapes, draws, seed, chunk=10**6):
    """Monte-Carlo mean and standard error of E[(W.theta - q)^+] for every theta."""
    thetas = _all_selections(len(shapes))
    rng = np.random.default_rng(seed)
    total = np.zeros(len(thetas))
    total_sq = np.zeros(len(thetas))
    done = 0
    while done < draws:
        size = min(chunk, draws - done)
        W = np.column_stack([pareto(a, size, rng) for a in shapes])
        pen = np.maximum(W @ thetas.T - q, 0.0)
        total += pen.sum(axis=0)
        total_sq += (pen * pen).sum(axis=0)
        done += size
    mean = total / draws
    var = np.maximum(total_sq / draws - mean**2, 0.0)
    return thetas, mean, np.sqrt(var / draws)


def resource_alloc_true_risk(theta, params: "ResourceAllocation") -> float:
    """Expected cost -(r.theta - c E[(W.theta - q)^+]) from the frozen oracle."""
    return params.risk(theta)


# ---------------------------------------------------------------------------
# Maximum weight matching on a complete bipartite graph
# ---------------------------------------------------------------------------


def max_weight_assignment(weights, rtol: float = 1e-12) -> np.ndarray:
    """Exact maximum-weight perfect matching; ties go to the lexicographically smallest permutation.

    Returns ``perm`` with row ``i`` matched to column ``perm[i]``.
    """
    W = np.asarray(weights, dtype=float)
    m = W.shape[0]
    if W.shape != (m, m):
        raise InvalidArgument(f"weights must be square, got shape {W.shape}")
    rows, cols = linear_sum_assignment(W, maximize=True)
    best = W[rows, cols].sum()
    tol = rtol * (1.0 + np.abs(W).sum())
    perm = np.empty(m, dtype=np.int64)
    free = list(range(m))
    fixed = 0.0
    for i in range(m):
        for j in free:
            rest = [c for c in free if c != j]
            value = fixed + W[i, j]
            if rest:
                sub = W[np.ix_(range(i + 1, m), rest)]
                r, c = linear_sum_assignment(sub, maximize=True)
                value += sub[r, c].sum()
            if value >= best - tol:
                perm[i] = j
                fixed += W[i, j]
                free = rest
                break
    return perm


def matching_saa(batch: SampleBatch, params: "Matching", rng=None) -> np.ndarray:
    if params.n_side > 16:
        raise InvalidArgument(f"matching supports n_side <= 16, got {params.n_side}")
    return max_weight_assignment(batch.items.mean(axis=0))


# ---------------------------------------------------------------------------
# Simplex-constrained quadratic programs (mean-variance portfolio)
# ---------------------------------------------------------------------------


class QPResult(NamedTuple):
    x: np.ndarray
    objective: float
    converged: bool
    iterations: int


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1}."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    x = np.maximum(v - tau, 0.0)
    return x / x.sum()


def simplex_qp_pgd(Q, max_iter: int = 20_000, tol: float = 1e-8) -> QPResult:
    """Minimize x'Qx over the simplex by projected gradient with step 1/L.

    L is twice the largest absolute row sum of Q, an upper bound on the
    gradient's Lipschitz constant. Stops when the gradient-mapping norm drops
    to ``tol``; otherwise returns the best iterate with ``converged=False``.
    Well-conditioned problems stop after a few dozen steps; the generous cap
    is for nearly collinear assets, where the fixed step crawls.
    """
    Q = np.asarray(Q, dtype=float)
    m = Q.shape[0]
    x = np.full(m, 1.0 / m)
    lip = 2.0 * np.abs(Q).sum(axis=1).max()
    if lip == 0.0:
        return QPResult(x, 0.0, True, 0)
    best_x, best_f = x, float(x @ Q @ x)
    for it in range(1, max_iter + 1):
        grad = 2.0 * Q @ x
        nxt = project_simplex(x - grad / lip)
        mapping = lip * np.linalg.norm(x - nxt)
        x = nxt
        f = float(x @ Q @ x)
        if f < best_f:
            best_x, best_f = x, f
        if mapping <= tol:
            return QPResult(best_x, best_f, True, it)
    return QPResult(best_x, best_f, False, max_iter)


def simplex_qp_exact(Q) -> QPResult:
    """Global minimum of x'Qx on the simplex by enumerating supports (small m only)."""
    Q = np.asarray(Q, dtype=float)
    m = Q.shape[0]
    if m > 14:
        raise InvalidArgument(f"support enumeration supports m <= 14, got {m}")
    best_x, best_f = None, np.inf
    for size in range(1, m + 1):
        for support in itertools.combinations(range(m), size):
            s = list(support)
            kkt = np.zeros((size + 1, size + 1))
            kkt[:size, :size] = 2.0 * Q[np.ix_(s, s)]
            kkt[:size, size] = -1.0
            kkt[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
            if not np.allclose(kkt @ sol, rhs, atol=1e-10):
                continue
            xs = sol[:size]
            if xs.min() < -1e-12:
                continue
            x = np.zeros(m)
            x[s] = np.maximum(xs, 0.0)
            x /= x.sum()
            f = float(x @ Q @ x)
            if f < best_f:
                best_x, best_f = x, f
    return QPResult(best_x, best_f, True, 0)


def portfolio_saa(batch: SampleBatch, params: "Portfolio", rng=None) -> QPResult:
    """Minimize the empirical variance (1/n) sum ((r_i - mu).theta)^2 over the simplex."""
    D = batch.items - params.mu
    return simplex_qp_pgd(D.T @ D / len(batch))


# ---------------------------------------------------------------------------
# Problem objects
# ---------------------------------------------------------------------------


class Problem:
    """Common surface used by the harness and the CLI."""

    name: ClassVar[str]
    discrete: ClassVar[bool]

    def sample(self, n: int, rng: np.random.Generator) -> SampleBatch:
        raise NotImplementedError

    def fit(self, batch: SampleBatch, rng=None):
        raise NotImplementedError

    def loss(self, theta, batch: SampleBatch) -> np.ndarray:
        raise NotImplementedError

    def risk(self, theta) -> float:
        raise NotImplementedError

    def optimal_risk(self) -> float:
        raise NotImplementedError

    def excess_risk(self, theta) -> float:
        return self.risk(theta) - self.optimal_risk()

    def oracle_info(self) -> dict:
        return {}


@dataclass(frozen=True)
class Constant(Problem):
    """Degenerate learner that ignores its data; handy for plumbing checks."""

    name: ClassVar[str] = "constant"
    discrete: ClassVar[bool] = True
    value: int = 0

    def sample(self, n, rng):
        return SampleBatch(np.zeros(n))

    def fit(self, batch, rng=None):
        return self.value

    def loss(self, theta, batch):
        return np.zeros(len(batch))

    def risk(self, theta):
        return 0.0

    def optimal_risk(self):
        return 0.0


@dataclass(frozen=True)
class LpExample(Problem):
    name: ClassVar[str] = "lp_example"
    discrete: ClassVar[bool] = True
    alpha: float = 2.1

    def __post_init__(self):
        _check_shape(self.alpha)

    def sample(self, n, rng):
        return gen_lp_example(n, self.alpha, rng)

    def fit(self, batch, rng=None):
        return lp_example_saa(batch)

    def loss(self, theta, batch):
        return batch.items * theta

    def risk(self, theta):
        return lp_example_true_risk(theta)

    def optimal_risk(self):
        return 0.0


@dataclass(frozen=True)
class Regression(Problem):
    name: ClassVar[str] = "regression"
    discrete: ClassVar[bool] = False
    alpha: float = 2.1

    def __post_init__(self):
        _check_shape(self.alpha, 2.0)

    @property
    def noise_variance(self) -> float:
        return pareto_difference_moments(self.alpha)[0]

    @property
    def noise_fourth_moment(self) -> float:
        return pareto_difference_moments(self.alpha)[1]

    def sample(self, n, rng):
        return gen_regression(n, self.alpha, rng)

    def fit(self, batch, rng=None):
        return regression_ls(batch)

    def loss(self, theta, batch):
        x, y = batch.items[:, 0], batch.items[:, 1]
        return (x * theta - y) ** 2

    def risk(self, theta):
        return float(theta) ** 2 + self.noise_variance

    def optimal_risk(self):
        return self.noise_variance

    def excess_risk(self, theta):
        return float(theta) ** 2


def _default_rewards():
    return (1.2, 1.45, 1.7)


@dataclass(frozen=True)
class ResourceAllocation(Problem):
    """Choose projects with rewards ``rewards``; resource beyond ``q`` costs ``cost`` per unit.

    Resource needs are independent Pareto(``shapes[i]``) draws. The true risk
    uses a frozen Monte-Carlo oracle with ``oracle_draws`` draws from
    ``oracle_seed``; common random numbers are shared across selections.
    """

    name: ClassVar[str] = "resource_allocation"
    discrete: ClassVar[bool] = True
    rewards: tuple = field(default_factory=_default_rewards)
    cost: float = 1.0
    q: float = 2.0
    shapes: tuple = (2.1, 2.1, 2.1)
    oracle_draws: int = 10**7
    oracle_seed: int = 20240517

    def __post_init__(self):
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "shapes", tuple(float(a) for a in self.shapes))
        if len(self.rewards) != len(self.shapes):
            raise InvalidArgument("rewards and shapes must have the same length")
        if not 1 <= self.m <= 20:
            raise InvalidArgument(f"resource allocation supports 1 <= m <= 20, got {self.m}")
        if self.cost < 0 or self.q < 0:
            raise InvalidArgument("cost and q must be >= 0")
        for a in self.shapes:
            _check_shape(a)

    @property
    def m(self) -> int:
        return len(self.rewards)

    def sample(self, n, rng):
        return SampleBatch(np.column_stack([pareto(a, n, rng) for a in self.shapes]))

    def fit(self, batch, rng=None):
        return resource_alloc_saa(batch, self)

    def loss(self, theta, batch):
        theta = np.asarray(theta)
        usage = batch.items @ theta
        return -(np.dot(self.rewards, theta) - self.cost * np.maximum(usage - self.q, 0.0))

    def _table(self):
        if self.m > 10:
            raise InvalidArgument("the Monte-Carlo risk oracle supports m <= 10")
        return _penalty_table(self.rewards, self.cost, self.q, self.shapes,
                              self.oracle_draws, self.oracle_seed)

    def _index(self, theta) -> int:
        bits = np.asarray(theta, dtype=np.int64)
        return int(bits @ (1 << np.arange(self.m - 1, -1, -1)))

    def penalty(self, theta) -> tuple[float, float]:
        """Oracle estimate of E[(W.theta - q)^+] and its standard error."""
        if self.cost == 0:
            return 0.0, 0.0
        _, mean, se = self._table()
        i = self._index(theta)
        return float(mean[i]), float(se[i])

    def risk(self, theta):
        theta = np.asarray(theta)
        reward = float(np.dot(self.rewards, theta))
        if self.cost == 0 or not theta.any():
            return -reward
        return -(reward - self.cost * self.penalty(theta)[0])

    def risk_table(self) -> np.ndarray:
        thetas = _all_selections(self.m)
        return np.array([self.risk(t) for t in thetas])

    def optimal_risk(self):
        return float(self.risk_table().min())

    def oracle_info(self):
        _, _, se = self._table()
        return {
            "oracle": "monte_carlo",
            "oracle_seed": self.oracle_seed,
            "oracle_draws": self.oracle_draws,
            "optimal_risk": self.optimal_risk(),
            "max_standard_error": float(self.cost * se.max()),
        }


def _default_constants():
    # 5x5 pattern with a few competing near-optimal matchings.
    return (
        (3.0, 1.0, 2.0, 1.5, 1.0),
        (1.0, 3.0, 1.5, 2.0, 1.0),
        (2.0, 1.5, 3.0, 1.0, 1.5),
        (1.5, 2.0, 1.0, 3.0, 2.0),
        (1.0, 1.0, 1.5, 2.0, 3.0),
    )


def _default_random_edges():
    # (row, col, Pareto shape, scale); means are shape/(shape-1) * scale.
    return (
        (0, 0, 2.1, 1.5), (0, 2, 2.1, 1.2), (1, 1, 2.1, 1.5),
        (1, 3, 2.1, 1.2), (2, 2, 2.1, 1.5), (2, 0, 2.1, 1.2),
        (3, 3, 2.1, 1.5), (3, 4, 2.1, 1.2), (4, 4, 2.1, 1.5),
    )


@dataclass(frozen=True)
class Matching(Problem):
    """Maximum weight matching on a complete bipartite ``n_side`` x ``n_side`` graph.

    Edge weights are the constants in ``weights`` except for ``random_edges``,
    given as ``(row, col, shape, scale)``, whose weight is ``scale * Pareto(shape)``.
    """

    name: ClassVar[str] = "matching"
    discrete: ClassVar[bool] = True
    weights: tuple = field(default_factory=_default_constants)
    random_edges: tuple = field(default_factory=_default_random_edges)

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise InvalidArgument("weights must be a square matrix")
        if W.shape[0] > 16:
            raise InvalidArgument(f"matching supports n_side <= 16, got {W.shape[0]}")
        object.__setattr__(self, "weights", tuple(tuple(row) for row in W.tolist()))
        edges = tuple((int(i), int(j), float(a), float(s)) for i, j, a, s in self.random_edges)
        for i, j, a, s in edges:
            if not (0 <= i < W.shape[0] and 0 <= j < W.shape[0]):
                raise InvalidArgument(f"random edge ({i}, {j}) is outside the graph")
            _check_shape(a)
        object.__setattr__(self, "random_edges", edges)

    @property
    def n_side(self) -> int:
        return len(self.weights)

    def mean_weights(self) -> np.ndarray:
        W = np.array(self.weights, dtype=float)
        for i, j, a, s in self.random_edges:
            W[i, j] = s * pareto_moment(a, 1)
        return W

    def sample(self, n, rng):
        W = np.broadcast_to(np.asarray(self.weights, dtype=float), (n, self.n_side, self.n_side)).copy()
        for i, j, a, s in self.random_edges:
            W[:, i, j] = s * pareto(a, n, rng)
        return SampleBatch(W)

    def fit(self, batch, rng=None):
        return matching_saa(batch, self)

    def loss(self, theta, batch):
        perm = np.asarray(theta)
        return -batch.items[:, np.arange(self.n_side), perm].sum(axis=1)

    def risk(self, theta):
        perm = np.asarray(theta)
        return -float(self.mean_weights()[np.arange(self.n_side), perm].sum())

    def optimal_risk(self):
        return self.risk(max_weight_assignment(self.mean_weights()))


@dataclass(frozen=True)
class Portfolio(Problem):
    """Mean-variance portfolio over ``m`` assets built from Pareto underlyings.

    Asset ``i`` returns half of underlying ``s*i`` plus the equal-weighted
    average of all underlyings divided by two, where ``s = n_underlying // m``.
    The return floor ``b`` must not exceed the smallest mean return, which
    keeps the return constraint inactive.
    """

    name: ClassVar[str] = "portfolio"
    discrete: ClassVar[bool] = False
    m: int = 10
    n_underlying: int = 100
    shape: float = 2.1
    b: float | None = None

    def __post_init__(self):
        if not 1 <= self.m <= self.n_underlying:
            raise InvalidArgument("need 1 <= m <= n_underlying")
        _check_shape(self.shape, 2.0)
        if self.b is not None and self.b > self.mu.min() + 1e-12:
            raise InvalidArgument(
                f"return floor b={self.b} exceeds min mean return {self.mu.min():.6g}; "
                "only an inactive floor is supported"
            )

    @property
    def mixing(self) -> np.ndarray:
        step = self.n_underlying // self.m
        M = np.full((self.m, self.n_underlying), 1.0 / (2 * self.n_underlying))
        M[np.arange(self.m), step * np.arange(self.m)] += 0.5
        return M

    @property
    def mu(self) -> np.ndarray:
        return self.mixing.sum(axis=1) * pareto_moment(self.shape, 1)

    @property
    def covariance(self) -> np.ndarray:
        var = pareto_moment(self.shape, 2) - pareto_moment(self.shape, 1) ** 2
        M = self.mixing
        return var * (M @ M.T)

    def sample(self, n, rng):
        u = pareto(self.shape, (n, self.n_underlying), rng)
        return SampleBatch(u @ self.mixing.T)

    def fit(self, batch, rng=None):
        return portfolio_saa(batch, self).x

    def loss(self, theta, batch):
        return ((batch.items - self.mu) @ np.asarray(theta)) ** 2

    def risk(self, theta):
        theta = np.asarray(theta, dtype=float)
        return float(theta @ self.covariance @ theta)

    def optimal_risk(self):
        return _portfolio_optimum(self.m, self.n_underlying, self.shape)


@lru_cache(maxsize=8)
def _portfolio_optimum(m, n_underlying, shape):
    return simplex_qp_exact(Portfolio(m, n_underlying, shape).covariance).objective


PROBLEMS: dict[str, type[Problem]] = {
    cls.name: cls for cls in (Constant, LpExample, Regression, ResourceAllocation, Matching, Portfolio)
}


def make_problem(name: str, **params) -> Problem:
    try:
        cls = PROBLEMS[name]
    except KeyError:
        raise InvalidArgument(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return cls(**params)
