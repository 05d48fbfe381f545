"""Subsampling machinery and the model-level voting ensembles.

Two procedures live here:

* ``run_move`` trains the base learner on ``B`` random subsamples and returns
  the most frequent model (majority vote over models, not over predictions).
* ``run_rove`` first retrieves candidate models from subsamples (phase I),
  then lets ``B2`` fresh subsamples vote for every candidate whose mean loss
  is within ``epsilon`` of the best candidate on that subsample (phase II).

A base learner is any callable ``learner(batch, rng) -> theta``. A loss oracle
is any callable ``loss(theta, batch) -> ndarray`` returning one loss per item.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numba import njit

__all__ = [
    "InvalidArgument",
    "LearnerError",
    "LossError",
    "SampleBatch",
    "ModelKey",
    "EnsembleConfig",
    "VoteTally",
    "EnsembleOutput",
    "EpsilonProfile",
    "subsample_indices",
    "subsample_matrix",
    "run_move",
    "retrieve_phase1",
    "epsilon_vote_phase2",
    "epsilon_profile",
    "select_epsilon",
    "run_rove",
]

Learner = Callable[["SampleBatch", np.random.Generator], Any]
LossOracle = Callable[[Any, "SampleBatch"], np.ndarray]

# Phase II keeps a dense (model x item) loss table up to this many entries.
LOSS_CACHE_LIMIT = 10**7


class InvalidArgument(ValueError):
    """Raised when an operation is called outside its domain."""


class LearnerError(RuntimeError):
    """The base learner failed on one subsample."""

    def __init__(self, ballot: int, cause: BaseException):
        super().__init__(f"base learner failed on subsample {ballot}: {cause!r}")
        self.ballot = ballot


class LossError(ValueError):
    """A loss evaluation produced a non-finite value."""

    def __init__(self, model_index: int, data_index: int, value: float):
        super().__init__(
            f"non-finite loss {value!r} for model {model_index} at data index {data_index}"
        )
        self.model_index = model_index
        self.data_index = data_index


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Ordered observations; axis 0 of ``items`` indexes observations."""

    items: np.ndarray

    def __post_init__(self):
        items = np.asarray(self.items)
        if items.ndim == 0 or items.shape[0] < 1:
            raise InvalidArgument("a sample batch needs at least one observation")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return self.items.shape[0]

    def __getitem__(self, i):
        return self.items[i]

    def take(self, indices) -> "SampleBatch":
        return SampleBatch(self.items[np.asarray(indices)])

    def head(self, m: int) -> "SampleBatch":
        return SampleBatch(self.items[:m])

    def tail(self, start: int) -> "SampleBatch":
        return SampleBatch(self.items[start:])


# ---------------------------------------------------------------------------
# Model keys
# ---------------------------------------------------------------------------

_SIGN64 = np.uint64(1 << 63)


@dataclass(frozen=True, order=True)
class ModelKey:
    """Canonical byte encoding of a model.

    Layout: one kind byte (``i`` integer, ``f`` float), one byte for the number
    of dimensions, 4 bytes per dimension, then 8 big-endian bytes per entry.
    Entries are mapped to unsigned words that sort like the numbers they
    encode, so byte order agrees with lexicographic numeric order for models
    of the same shape.
    """

    data: bytes

    @classmethod
    def of(cls, theta) -> "ModelKey":
        arr = np.asarray(theta)
        if arr.dtype.kind in "biu":
            kind = b"i"
            words = arr.astype(np.int64).view(np.uint64) ^ _SIGN64
        elif arr.dtype.kind == "f":
            kind = b"f"
            # +0.0 turns -0.0 into 0.0 so both zeros share one key.
            bits = (arr.astype(np.float64) + 0.0).view(np.uint64)
            neg = (bits & _SIGN64) != 0
            words = np.where(neg, ~bits, bits | _SIGN64)
        else:
            raise InvalidArgument(f"cannot key a model of dtype {arr.dtype}")
        header = kind + bytes([arr.ndim]) + b"".join(struct.pack(">I", s) for s in arr.shape)
        return cls(header + np.ascontiguousarray(words, dtype=">u8").tobytes())

    def decode(self):
        kind, ndim = self.data[0:1], self.data[1]
        shape = struct.unpack(f">{ndim}I", self.data[2 : 2 + 4 * ndim])
        words = np.frombuffer(self.data[2 + 4 * ndim :], dtype=">u8").astype(np.uint64)
        if kind == b"i":
            arr = (words ^ _SIGN64).view(np.int64)
        else:
            pos = (words & _SIGN64) != 0
            arr = np.where(pos, words ^ _SIGN64, ~words).view(np.float64)
        arr = arr.reshape(shape)
        return arr.item() if ndim == 0 else arr

    def __str__(self) -> str:
        value = self.decode()
        if np.ndim(value) == 0:
            return _fmt(value)
        return ";".join(_fmt(v) for v in np.ravel(value))

    def __repr__(self) -> str:
        return f"ModelKey({self})"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".12g")


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleConfig:
    """Subsample sizes, ensemble sizes, split flag and epsilon strategy.

    ``k``/``B`` drive MoVE; ``k1``/``k2``/``B1``/``B2``/``split``/``epsilon``
    drive ROVE. ``epsilon`` is either a nonnegative float or ``"adaptive"``.
    """

    k: int = 10
    B: int = 200
    k1: int = 10
    k2: int = 10
    B1: int = 20
    B2: int = 200
    split: bool = False
    epsilon: float | str = "adaptive"

    @classmethod
    def recommended(cls, n: int, continuous: bool = False, split: bool = False) -> "EnsembleConfig":
        """Default hyperparameters as a function of the sample size."""
        if continuous:
            return cls(
                k=max(10, n // 200),
                B=200,
                k1=max(30, n // 2),
                k2=max(30, n // 200),
                B1=50,
                B2=200,
                split=split,
            )
        k = max(10, n // 200)
        return cls(k=k, B=200, k1=k, k2=k, B1=20, B2=200, split=split)

    @property
    def adaptive(self) -> bool:
        return isinstance(self.epsilon, str)

    def _check_epsilon(self):
        if isinstance(self.epsilon, str):
            if self.epsilon != "adaptive":
                raise InvalidArgument(f"epsilon must be a number or 'adaptive', got {self.epsilon!r}")
        elif not (self.epsilon >= 0 and np.isfinite(self.epsilon)):
            raise InvalidArgument(f"epsilon must be finite and >= 0, got {self.epsilon!r}")

    def check_move(self, n: int):
        if self.B < 1:
            raise InvalidArgument(f"B must be >= 1, got {self.B}")
        if not 1 <= self.k < n:
            raise InvalidArgument(f"k must satisfy 1 <= k < n, got k={self.k}, n={n}")

    def check_rove(self, n: int):
        for name in ("B1", "B2"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1, got {getattr(self, name)}")
        self._check_epsilon()
        for name in ("k1", "k2"):
            value = getattr(self, name)
            if self.split:
                if not 1 <= value <= n // 2:
                    raise InvalidArgument(
                        f"{name} must satisfy 1 <= {name} <= floor(n/2) with split, got {name}={value}, n={n}"
                    )
            elif not 1 <= value < n:
                raise InvalidArgument(f"{name} must satisfy 1 <= {name} < n, got {name}={value}, n={n}")


@dataclass
class VoteTally:
    """Vote counts keyed by ModelKey (MoVE) or retrieved-model index (ROVE)."""

    counts: dict
    total_ballots: int

    def winner(self, key_of=lambda c: c):
        """Candidate with the maximal count; ties go to the smallest ModelKey."""
        top = max(self.counts.values())
        return min((c for c, v in self.counts.items() if v == top), key=key_of)


@dataclass
class EnsembleOutput:
    model: Any
    key: ModelKey
    tally: VoteTally
    retrieved: list = field(default_factory=list)
    epsilon: float | None = None

    @property
    def retrieved_keys(self) -> list[ModelKey]:
        return [ModelKey.of(m) for m in self.retrieved]


# ---------------------------------------------------------------------------
# Subsampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _apply_swaps(n, draws):
    rows, k = draws.shape
    out = np.empty((rows, k), dtype=np.int64)
    perm = np.arange(n)
    for r in range(rows):
        for i in range(k):
            j = draws[r, i]
            perm[i], perm[j] = perm[j], perm[i]
            out[r, i] = perm[i]
        # Undo in reverse so perm is the identity again.
        for i in range(k - 1, -1, -1):
            j = draws[r, i]
            perm[i], perm[j] = perm[j], perm[i]
    return out


def subsample_matrix(n: int, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` independent uniform k-subsets of ``range(n)``, one per row.

    Each row is a partial Fisher-Yates shuffle driven by exactly ``k`` bounded
    integer draws (draw ``i`` is uniform on ``[i, n)``), so the stream position
    after the call depends only on ``(n, k, count)``.
    """
    if not 1 <= k <= n:
        raise InvalidArgument(f"subsample size must satisfy 1 <= k <= n, got k={k}, n={n}")
    if count < 0:
        raise InvalidArgument(f"count must be >= 0, got {count}")
    draws = rng.integers(np.arange(k, dtype=np.int64), n, size=(count, k), dtype=np.int64)
    return _apply_swaps(n, draws)


def subsample_indices(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct indices drawn uniformly without replacement from ``range(n)``."""
    return subsample_matrix(n, k, 1, rng)[0]


# ---------------------------------------------------------------------------
# MoVE
# ---------------------------------------------------------------------------


def _fit(base: Learner, batch: SampleBatch, rng, ballot: int):
    try:
        return base(batch, rng)
    except Exception as exc:
        raise LearnerError(ballot, exc) from exc


def run_move(base: Learner, data: SampleBatch, cfg: EnsembleConfig, rng: np.random.Generator) -> EnsembleOutput:
    """Majority vote over models trained on ``cfg.B`` subsamples of size ``cfg.k``."""
    n = len(data)
    cfg.check_move(n)
    sub_rng, learner_rng = rng.spawn(2)
    subsamples = subsample_matrix(n, cfg.k, cfg.B, sub_rng)
    counts: dict[ModelKey, int] = {}
    models: dict[ModelKey, Any] = {}
    for b, idx in enumerate(subsamples):
        theta = _fit(base, data.take(idx), learner_rng, b)
        key = ModelKey.of(theta)
        counts[key] = counts.get(key, 0) + 1
        models.setdefault(key, theta)
    tally = VoteTally(counts, cfg.B)
    best = tally.winner()
    return EnsembleOutput(model=models[best], key=best, tally=tally)


# ---------------------------------------------------------------------------
# ROVE
# ---------------------------------------------------------------------------


def _phase1_data(data: SampleBatch, split: bool) -> SampleBatch:
    return data.head(len(data) // 2) if split else data


def _phase2_data(data: SampleBatch, split: bool) -> tuple[SampleBatch, int]:
    if split:
        start = len(data) // 2
        return data.tail(start), start
    return data, 0


def retrieve_phase1(base: Learner, data: SampleBatch, cfg: EnsembleConfig, rng: np.random.Generator) -> list:
    """Train on ``cfg.B1`` subsamples and return the distinct models in first-seen order."""
    cfg.check_rove(len(data))
    pool = _phase1_data(data, cfg.split)
    sub_rng, learner_rng = rng.spawn(2)
    subsamples = subsample_matrix(len(pool), cfg.k1, cfg.B1, sub_rng)
    seen: dict[ModelKey, Any] = {}
    for b, idx in enumerate(subsamples):
        theta = _fit(base, pool.take(idx), learner_rng, b)
        seen.setdefault(ModelKey.of(theta), theta)
    return list(seen.values())


def _check_finite(losses: np.ndarray, model_index: int, data_index):
    if not np.all(np.isfinite(losses)):
        j = int(np.flatnonzero(~np.isfinite(losses))[0])
        where = int(data_index[j]) if data_index is not None else j
        raise LossError(model_index, where, float(losses[j]))


def _ballot_means(models: Sequence, loss: LossOracle, pool: SampleBatch, offset: int,
                  subsamples: np.ndarray) -> np.ndarray:
    """Mean loss of every model on every subsample, shape (ballots, models)."""
    m = len(pool)
    if len(models) * m <= LOSS_CACHE_LIMIT:
        table = np.empty((len(models), m))
        for s, theta in enumerate(models):
            row = np.asarray(loss(theta, pool), dtype=float)
            _check_finite(row, s, np.arange(m) + offset)
            table[s] = row
        return table[:, subsamples].mean(axis=2).T
    out = np.empty((subsamples.shape[0], len(models)))
    for b, idx in enumerate(subsamples):
        part = pool.take(idx)
        for s, theta in enumerate(models):
            row = np.asarray(loss(theta, part), dtype=float)
            _check_finite(row, s, idx + offset)
            out[b, s] = row.mean()
    return out


def _gaps(means: np.ndarray) -> np.ndarray:
    return means - means.min(axis=1, keepdims=True)


def _rove_output(models: list, votes: np.ndarray, ballots: int, epsilon: float) -> EnsembleOutput:
    keys = [ModelKey.of(m) for m in models]
    tally = VoteTally({s: int(v) for s, v in enumerate(votes)}, ballots)
    best = tally.winner(key_of=lambda s: keys[s])
    return EnsembleOutput(model=models[best], key=keys[best], tally=tally,
                          retrieved=list(models), epsilon=float(epsilon))


def epsilon_vote_phase2(models: Sequence, loss: LossOracle, data: SampleBatch, cfg: EnsembleConfig,
                        epsilon: float, rng: np.random.Generator) -> EnsembleOutput:
    """Each of ``cfg.B2`` subsamples votes for every model within ``epsilon`` of its best."""
    if not models:
        raise InvalidArgument("phase II needs at least one retrieved model")
    if not epsilon >= 0:
        raise InvalidArgument(f"epsilon must be >= 0, got {epsilon!r}")
    pool, offset = _phase2_data(data, cfg.split)
    subsamples = subsample_matrix(len(pool), cfg.k2, cfg.B2, rng)
    means = _ballot_means(models, loss, pool, offset, subsamples)
    votes = (_gaps(means) <= epsilon).sum(axis=0)
    return _rove_output(list(models), votes, cfg.B2, epsilon)


@dataclass
class EpsilonProfile:
    """Maximal vote fraction ``g(eps)`` on one fixed batch of ballots."""

    gaps: np.ndarray  # (ballots, models): mean loss minus the ballot minimum

    @property
    def spread(self) -> float:
        return float(self.gaps.max())

    def g(self, epsilon: float) -> float:
        return float((self.gaps <= epsilon).sum(axis=0).max()) / self.gaps.shape[0]

    def select(self, level: float = 0.5, rel_tol: float = 1e-6) -> float:
        """Smallest epsilon on the bisection grid with ``g(epsilon) >= level``."""
        if self.g(0.0) >= level:
            return 0.0
        spread = self.spread
        lo, hi = 0.0, spread
        tol = rel_tol * (1.0 + spread)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self.g(mid) >= level:
                hi = mid
            else:
                lo = mid
        return hi


def epsilon_profile(models: Sequence, loss: LossOracle, data: SampleBatch, cfg: EnsembleConfig,
                    rng: np.random.Generator) -> EpsilonProfile:
    """Draw the epsilon-selection ballots (phase I data when splitting)."""
    if not models:
        raise InvalidArgument("epsilon selection needs at least one retrieved model")
    pool = _phase1_data(data, cfg.split)
    subsamples = subsample_matrix(len(pool), cfg.k2, cfg.B2, rng)
    return EpsilonProfile(_gaps(_ballot_means(models, loss, pool, 0, subsamples)))


def select_epsilon(models: Sequence, loss: LossOracle, data: SampleBatch, cfg: EnsembleConfig,
                   rng: np.random.Generator) -> float:
    return epsilon_profile(models, loss, data, cfg, rng).select()


def run_rove(base: Learner, loss: LossOracle, data: SampleBatch, cfg: EnsembleConfig,
             rng: np.random.Generator) -> EnsembleOutput:
    """Retrieval followed by the epsilon-optimality vote (ROVEs when ``cfg.split``)."""
    cfg.check_rove(len(data))
    rng1, rng_eps, rng2 = rng.spawn(3)
    models = retrieve_phase1(base, data, cfg, rng1)
    if cfg.adaptive:
        epsilon = select_epsilon(models, loss, data, cfg, rng_eps)
    else:
        epsilon = float(cfg.epsilon)
    return epsilon_vote_phase2(models, loss, data, cfg, epsilon, rng2)
