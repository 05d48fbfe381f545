"""YAML run configuration with line-anchored validation errors.

Example::

    seed: 7
    replications: 500
    delta: 0.5
    n_grid: [200, 400, 800]
    methods: [base, move, rove]
    problem:
      name: lp_example
      alpha: 2.1
    move: {k: "max(10, n/200)", B: 200}
    rove: {k1: 10, k2: 10, B1: 20, B2: 200, epsilon: adaptive}
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import yaml

from .core import InvalidArgument
from .harness import METHODS, ConfigFactory, ExperimentPlan, Formula
from .problems import PROBLEMS, Problem

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]

TOP_KEYS = {"seed", "replications", "delta", "n_grid", "methods", "problem", "move", "rove", "roves", "output"}
SECTION_KEYS = {
    "move": {"k", "B"},
    "rove": {"k1", "k2", "B1", "B2", "epsilon"},
    "roves": {"k1", "k2", "B1", "B2", "epsilon"},
}
OUTPUT_KEYS = {"dir"}


class ConfigError(ValueError):
    def __init__(self, source: str, line: int | None, field: str, message: str):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {field}: {message}")
        self.line = line
        self.field = field


@dataclass
class RunConfig:
    plan: ExperimentPlan
    source: str
    sha256: str
    output_dir: str | None = None
    text: str = ""


def _key_lines(node, prefix=()) -> dict[tuple, int]:
    """1-based line of every mapping key, addressed by its path."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, path))
    return lines


class _Checker:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, message: str):
        line = None
        for cut in range(len(path), 0, -1):
            if path[:cut] in self.lines:
                line = self.lines[path[:cut]]
                break
        raise ConfigError(self.source, line, ".".join(path) or "<root>", message)

    def mapping(self, value, path, allowed=None):
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        if allowed is not None:
            for key in value:
                if key not in allowed:
                    self.fail(path + (str(key),), f"unknown key; allowed: {', '.join(sorted(allowed))}")
        return value

    def integer(self, value, path, minimum=None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}, got {value}")
        return value

    def number(self, value, path):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        return float(value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(source, line, "<yaml>", str(getattr(exc, "problem", exc))) from None
    lines = _key_lines(root)
    chk = _Checker(source, lines)
    data = chk.mapping(data if data is not None else {}, (), TOP_KEYS)

    seed = chk.integer(data.get("seed", 0), ("seed",), 0)
    replications = chk.integer(data.get("replications", 500), ("replications",), 1)
    delta = chk.number(data.get("delta", 0.5), ("delta",))
    if not delta > 0:
        chk.fail(("delta",), f"must be > 0, got {delta}")

    if "n_grid" not in data:
        chk.fail(("n_grid",), "missing required key")
    n_grid = data["n_grid"]
    if not isinstance(n_grid, list) or not n_grid:
        chk.fail(("n_grid",), "expected a non-empty list of sample sizes")
    for n in n_grid:
        chk.integer(n, ("n_grid",), 2)
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        chk.fail(("n_grid",), "must be strictly increasing")

    methods = data.get("methods", ["base", "move", "rove"])
    if not isinstance(methods, list) or not methods:
        chk.fail(("methods",), "expected a non-empty list")
    for m in methods:
        if m not in METHODS:
            chk.fail(("methods",), f"unknown method {m!r}; allowed: {', '.join(METHODS)}")

    problem = _parse_problem(chk, data.get("problem"))
    if "move" in methods and not problem.discrete:
        chk.fail(("methods",), f"move needs a discrete problem; {problem.name} is continuous")

    configs = {}
    for section in ("move", "rove", "roves"):
        if section in data:
            raw = chk.mapping(data[section], (section,), SECTION_KEYS[section])
            configs[section] = _parse_section(chk, section, raw)

    plan = ExperimentPlan(problem=problem, methods=tuple(methods), n_grid=tuple(n_grid),
                          replications=replications, delta=delta, configs=configs, seed=seed)
    _check_sizes(chk, plan)

    output_dir = None
    if "output" in data:
        out = chk.mapping(data["output"], ("output",), OUTPUT_KEYS)
        output_dir = out.get("dir")
    return RunConfig(plan, source, hashlib.sha256(text.encode()).hexdigest(), output_dir, text)


def _parse_problem(chk: _Checker, raw) -> Problem:
    if raw is None:
        chk.fail(("problem",), "missing required section")
    raw = chk.mapping(raw, ("problem",))
    name = raw.get("name")
    if name not in PROBLEMS:
        chk.fail(("problem", "name"), f"unknown problem {name!r}; allowed: {', '.join(sorted(PROBLEMS))}")
    cls = PROBLEMS[name]
    allowed = {f.name for f in dataclasses.fields(cls)}
    params = {}
    for key, value in raw.items():
        if key == "name":
            continue
        if key not in allowed:
            chk.fail(("problem", str(key)), f"unknown parameter for {name}; allowed: {', '.join(sorted(allowed))}")
        params[key] = _tuplify(value)
    try:
        return cls(**params)
    except (InvalidArgument, TypeError, ValueError) as exc:
        chk.fail(("problem",), str(exc))


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _parse_section(chk: _Checker, section: str, raw: dict) -> ConfigFactory:
    values = {}
    for key, value in raw.items():
        path = (section, key)
        if key == "epsilon":
            if value != "adaptive":
                value = chk.number(value, path)
                if value < 0:
                    chk.fail(path, f"must be >= 0 or 'adaptive', got {value}")
        elif isinstance(value, str):
            try:
                Formula(value)
            except InvalidArgument as exc:
                chk.fail(path, str(exc))
        else:
            chk.integer(value, path, 1)
        values[key] = value
    return ConfigFactory.from_mapping(values)


def _check_sizes(chk: _Checker, plan: ExperimentPlan):
    for method in plan.methods:
        if method == "base":
            continue
        for n in plan.n_grid:
            cfg = plan.config_for(method, n)
            if method == "move":
                if not 1 <= cfg.k < n:
                    chk.fail(("move", "k"), f"k={cfg.k} must satisfy 1 <= k < n at n={n}")
                if cfg.B < 1:
                    chk.fail(("move", "B"), f"B={cfg.B} must be >= 1 at n={n}")
                continue
            for name in ("k1", "k2"):
                value = getattr(cfg, name)
                if cfg.split and not 1 <= value <= n // 2:
                    chk.fail((method, name), f"{name}={value} must satisfy 1 <= {name} <= floor(n/2) at n={n}")
                if not cfg.split and not 1 <= value < n:
                    chk.fail((method, name), f"{name}={value} must satisfy 1 <= {name} < n at n={n}")
            for name in ("B1", "B2"):
                if getattr(cfg, name) < 1:
                    chk.fail((method, name), f"{name} must be >= 1 at n={n}")


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
