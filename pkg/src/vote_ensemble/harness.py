"""Seeded replication engine for excess-risk tail probabilities.

For each (method, n, replication) a dataset is drawn, a model is trained, and
its true excess risk is evaluated with the problem's risk oracle. Every
replication owns seeds derived from the master seed, so results do not
depend on execution order or on the number of worker processes.
"""
from __future__ import annotations

import ast
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import EnsembleConfig, InvalidArgument, run_move, run_rove
from .problems import Problem

__all__ = [
    "METHODS",
    "derive_seed",
    "Formula",
    "ConfigFactory",
    "ExperimentPlan",
    "TailCell",
    "TailCurve",
    "Comparison",
    "fit_method",
    "run_tail_experiment",
    "compare_methods",
    "CSV_HEADER",
]

METHODS = ("base", "move", "rove", "roves")
CSV_HEADER = ("method", "n", "replications", "tail", "tail_se", "mean_excess", "mean_se", "failures")

_MASK = (1 << 64) - 1


def _splitmix(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _label_words(label) -> list[int]:
    if isinstance(label, str):
        raw = label.encode()
        words = [0x5354520000000000 | len(raw)]  # "STR" tag plus length
        raw += b"\0" * (-len(raw) % 8)
        words += [int.from_bytes(raw[i : i + 8], "big") for i in range(0, len(raw), 8)]
        return words
    if isinstance(label, (int, np.integer)):
        return [0x494E540000000000, int(label) & _MASK]  # "INT" tag
    raise TypeError(f"seed labels must be str or int, got {type(label).__name__}")


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit child seed from a master seed and a tuple of labels."""
    h = _splitmix(int(master) & _MASK)
    for label in labels:
        for word in _label_words(label):
            h = _splitmix(h ^ word)
    return h


# ---------------------------------------------------------------------------
# Hyperparameter formulas
# ---------------------------------------------------------------------------

_FUNCS = {"max": max, "min": min, "floor": math.floor, "ceil": math.ceil}
_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Div: lambda a, b: a / b,
    ast.FloorDiv: lambda a, b: a // b,
}


@dataclass(frozen=True)
class Formula:
    """Arithmetic in ``n``: numbers, + - * / //, and max/min/floor/ceil calls.

    Sizes are rounded down, so ``max(10, n/200)`` gives 20 at n = 4096.
    """

    text: str

    def __post_init__(self):
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise InvalidArgument(f"cannot parse formula {self.text!r}: {exc.msg}") from None
        self._check(tree.body)

    def _check(self, node):
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return
        if isinstance(node, ast.Name) and node.id == "n":
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            self._check(node.operand)
            return
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and not node.keywords and node.args):
            for arg in node.args:
                self._check(arg)
            return
        raise InvalidArgument(f"unsupported element in formula {self.text!r}: {ast.dump(node)}")

    def __call__(self, n: int) -> float:
        return self._eval(ast.parse(self.text, mode="eval").body, n)

    def _eval(self, node, n):
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            return n
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, n), self._eval(node.right, n))
        if isinstance(node, ast.UnaryOp):
            return -self._eval(node.operand, n)
        return _FUNCS[node.func.id](*(self._eval(a, n) for a in node.args))

    def size(self, n: int) -> int:
        return int(math.floor(self(n)))


_SIZE_FIELDS = ("k", "B", "k1", "k2", "B1", "B2")


@dataclass(frozen=True)
class ConfigFactory:
    """Builds an EnsembleConfig for a given n; size fields may be Formulas."""

    values: tuple = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "ConfigFactory":
        items = []
        for name, value in mapping.items():
            if name in _SIZE_FIELDS and isinstance(value, str):
                value = Formula(value)
            items.append((name, value))
        return cls(tuple(items))

    @classmethod
    def recommended(cls, continuous: bool, split: bool = False) -> "ConfigFactory":
        if continuous:
            sizes = {"k": "max(10, n/200)", "B": 200, "k1": "max(30, n/2)", "k2": "max(30, n/200)",
                     "B1": 50, "B2": 200}
        else:
            sizes = {"k": "max(10, n/200)", "B": 200, "k1": "max(10, n/200)", "k2": "max(10, n/200)",
                     "B1": 20, "B2": 200}
        return cls.from_mapping({**sizes, "split": split, "epsilon": "adaptive"})

    def __call__(self, n: int) -> EnsembleConfig:
        kwargs = {}
        for name, value in self.values:
            kwargs[name] = value.size(n) if isinstance(value, Formula) else value
        return EnsembleConfig(**kwargs)


# ---------------------------------------------------------------------------
# Plans and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentPlan:
    problem: Problem
    methods: tuple
    n_grid: tuple
    replications: int = 500
    delta: float = 0.5
    configs: Mapping[str, ConfigFactory] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise InvalidArgument(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if self.replications < 1:
            raise InvalidArgument(f"replications must be >= 1, got {self.replications}")
        if not self.delta > 0:
            raise InvalidArgument(f"delta must be > 0, got {self.delta}")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])) or self.n_grid[0] < 2:
            raise InvalidArgument(f"n_grid must be strictly increasing integers >= 2, got {self.n_grid}")

    def config_for(self, method: str, n: int) -> EnsembleConfig:
        factory = self.configs.get(method)
        if factory is None:
            factory = ConfigFactory.recommended(not self.problem.discrete, split=(method == "roves"))
        cfg = factory(n)
        if method == "rove":
            cfg = replace(cfg, split=False)
        elif method == "roves":
            cfg = replace(cfg, split=True)
        return cfg

    def validate(self):
        """Check every ensemble configuration against every n before running."""
        for method in self.methods:
            for n in self.n_grid:
                cfg = self.config_for(method, n)
                if method == "move":
                    cfg.check_move(n)
                elif method in ("rove", "roves"):
                    cfg.check_rove(n)


def fit_method(problem: Problem, method: str, data, cfg: EnsembleConfig, rng: np.random.Generator):
    if method == "base":
        return problem.fit(data, rng)
    if method == "move":
        return run_move(problem.fit, data, cfg, rng).model
    if method in ("rove", "roves"):
        return run_rove(problem.fit, problem.loss, data, cfg, rng).model
    raise InvalidArgument(f"unknown method {method!r}")


@dataclass
class TailCell:
    method: str
    n: int
    replications: int
    tail: float
    tail_se: float
    mean_excess: float
    mean_se: float
    failures: int
    failed_seeds: list = field(default_factory=list)
    seconds: float = 0.0

    def row(self) -> list[str]:
        return [self.method, str(self.n), str(self.replications), _num(self.tail), _num(self.tail_se),
                _num(self.mean_excess), _num(self.mean_se), str(self.failures)]


def _num(x: float) -> str:
    return format(float(x), ".12g")


def _round12(x: float) -> float:
    return float(_num(x))


@dataclass
class TailCurve:
    cells: dict
    delta: float
    seed: int

    def cell(self, method: str, n: int) -> TailCell:
        try:
            return self.cells[(method, n)]
        except KeyError:
            raise InvalidArgument(f"no result for method {method!r} at n={n}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for cell in self.cells.values():
            writer.writerow(cell.row())
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "delta": _round12(self.delta),
            "seed": self.seed,
            "cells": [
                {
                    "method": c.method,
                    "n": c.n,
                    "replications": c.replications,
                    "tail": _round12(c.tail),
                    "tail_se": _round12(c.tail_se),
                    "mean_excess": _round12(c.mean_excess),
                    "mean_se": _round12(c.mean_se),
                    "failures": c.failures,
                    "failed_seeds": c.failed_seeds,
                }
                for c in self.cells.values()
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _replicate(plan: ExperimentPlan, method: str, n: int, r: int):
    data_seed = derive_seed(plan.seed, "data", n, r)
    method_seed = derive_seed(plan.seed, method, n, r)
    start = time.perf_counter()
    try:
        data = plan.problem.sample(n, np.random.default_rng(data_seed))
        cfg = plan.config_for(method, n)
        theta = fit_method(plan.problem, method, data, cfg, np.random.default_rng(method_seed))
        excess = float(plan.problem.excess_risk(theta))
        if not math.isfinite(excess):
            raise ValueError(f"non-finite excess risk {excess!r}")
    except Exception as exc:  # a failed replication is reported, not imputed
        return None, {"seed": method_seed, "data_seed": data_seed, "error": repr(exc)}, 0.0
    return excess, None, time.perf_counter() - start


def _run_block(plan: ExperimentPlan, tasks: Sequence[tuple]) -> list:
    return [_replicate(plan, *task) for task in tasks]


def _chunks(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def run_tail_experiment(plan: ExperimentPlan, workers: int | None = None) -> TailCurve:
    """Estimate P(excess risk > delta) for every (method, n) in the plan.

    ``workers`` > 1 spreads replications over a process pool; the reduction
    runs in task order, so the result is identical for any worker count.
    """
    plan.validate()
    tasks = [(m, n, r) for m in plan.methods for n in plan.n_grid for r in range(plan.replications)]
    workers = workers or os.cpu_count() or 1
    if workers <= 1:
        outcomes = _run_block(plan, tasks)
    else:
        blocks = _chunks(tasks, max(1, math.ceil(len(tasks) / (4 * workers))))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = [o for part in pool.map(_run_block, [plan] * len(blocks), blocks) for o in part]

    grouped: dict[tuple, list] = {(m, n): [] for m in plan.methods for n in plan.n_grid}
    for (method, n, _), outcome in zip(tasks, outcomes):
        grouped[(method, n)].append(outcome)
    cells = {key: _aggregate(key, results, plan.delta) for key, results in grouped.items()}
    return TailCurve(cells, plan.delta, plan.seed)


def _aggregate(key, results, delta) -> TailCell:
    excess = np.array([e for e, _, _ in results if e is not None], dtype=float)
    failed = [err for _, err, _ in results if err is not None]
    m = excess.size
    if m:
        tail = float(np.count_nonzero(excess > delta)) / m
        tail_se = math.sqrt(tail * (1.0 - tail) / m)
        mean = float(excess.mean())
        mean_se = float(excess.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    else:
        tail = tail_se = mean = mean_se = math.nan
    seconds = sum(s for _, _, s in results)
    return TailCell(key[0], key[1], m, tail, tail_se, mean, mean_se, len(failed), failed, seconds)


@dataclass(frozen=True)
class Comparison:
    method_a: str
    method_b: str
    n: int
    difference: float  # tail_a - tail_b
    se: float
    a_dominates: bool


def compare_methods(curve: TailCurve, method_a: str, method_b: str, n: int) -> Comparison:
    """Tail difference with a combined standard error; flags dominance beyond 3 SE."""
    a, b = curve.cell(method_a, n), curve.cell(method_b, n)
    diff = a.tail - b.tail
    se = math.sqrt(a.tail_se**2 + b.tail_se**2)
    return Comparison(method_a, method_b, n, diff, se, -diff > 3.0 * se)
