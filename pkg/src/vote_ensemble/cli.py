"""Command-line entry point: ``vote-ensemble {experiment,bounds,pk}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .core import InvalidArgument
from .harness import run_tail_experiment
from .theory import BoundInputs, estimate_pk, move_bound

EXIT_OK = 0
EXIT_INVALID = 2


def _workers(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("VOTE_ENSEMBLE_WORKERS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_INVALID


def cmd_experiment(args) -> int:
    try:
        run = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    plan = run.plan
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    out = Path(args.out or run.output_dir or "results")
    out.mkdir(parents=True, exist_ok=True)
    workers = _workers(args.workers)

    start = time.perf_counter()
    curve = run_tail_experiment(plan, workers=workers)
    elapsed = time.perf_counter() - start

    (out / "results.csv").write_text(curve.to_csv(), newline="")
    (out / "results.json").write_text(curve.to_json(), newline="")
    failures = {f"{c.method}/{c.n}": c.failures for c in curve.cells.values()}
    manifest = {
        "artifact_version": __version__,
        "config_path": run.source,
        "config_sha256": run.sha256,
        "config_text": run.text,
        "master_seed": plan.seed,
        "seed_overridden": args.seed is not None,
        "workers": workers,
        "failures": failures,
        "total_failures": sum(failures.values()),
        "oracle": plan.problem.oracle_info(),
        "seconds": {"total": round(elapsed, 3),
                    **{f"{c.method}/{c.n}": round(c.seconds, 3) for c in curve.cells.values()}},
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", newline="")
    if manifest["total_failures"]:
        print(f"warning: {manifest['total_failures']} replication(s) failed; see manifest.json", file=sys.stderr)
    print(curve.to_csv(), end="")
    return EXIT_OK


def _read_pk_file(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidArgument(f"{path} has no rows")
    probs = sorted((float(r["p_hat"]) for r in rows), reverse=True)
    p_max = probs[0]
    eta = p_max - (probs[1] if len(probs) > 1 else 0.0)
    return p_max, eta, len(rows)


def cmd_bounds(args) -> int:
    p_max, eta, cardinality = args.p_max, args.eta, args.cardinality
    try:
        if args.pk_file:
            p_file, eta_file, rows = _read_pk_file(args.pk_file)
            p_max = p_file if p_max is None else p_max
            eta = eta_file if eta is None else eta
            cardinality = rows if cardinality is None else cardinality
        if p_max is None or eta is None or cardinality is None:
            return _fail("need --p-max, --eta and --cardinality (or --pk-file)")
        inputs = BoundInputs(p_max=p_max, eta=eta, n=args.n, k=args.k, B=args.B, cardinality=cardinality)
    except (InvalidArgument, OSError, KeyError, ValueError) as exc:
        return _fail(str(exc))
    bound = move_bound(inputs)
    print(f"p_max {inputs.p_max!r}")
    print(f"eta {inputs.eta!r}")
    for i, term in enumerate(bound.terms, start=1):
        print(f"term{i} {term!r}")
    print(f"cardinality {inputs.cardinality}")
    print(f"total {bound.total!r}")
    return EXIT_OK


def cmd_pk(args) -> int:
    try:
        run = load_config(args.config)
    except (ConfigError, OSError) as exc:
        return _fail(str(exc))
    problem = run.plan.problem
    if not problem.discrete:
        return _fail("p_k tables require discrete models")
    if args.k < 1 or args.trials < 1:
        return _fail("--k and --trials must be >= 1")
    seed = run.plan.seed if args.seed is None else args.seed
    table = estimate_pk(problem.fit, problem.sample, args.k, args.trials, np.random.default_rng(seed))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model_key", "p_hat", "se"])
    for key, p, se in table.rows():
        writer.writerow([str(key), format(p, ".12g"), format(se, ".12g")])
    if args.out:
        Path(args.out).write_text(buf.getvalue(), newline="")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vote-ensemble",
                                     description="Model-level voting ensembles and tail experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("experiment", help="run a tail-probability experiment from a config file")
    exp.add_argument("--config", required=True)
    exp.add_argument("--out", help="output directory (default: config output.dir or ./results)")
    exp.add_argument("--seed", type=int, help="override the master seed")
    exp.add_argument("--workers", type=int,
                     help="worker processes (default: $VOTE_ENSEMBLE_WORKERS or logical cores)")
    exp.set_defaults(func=cmd_experiment)

    bnd = sub.add_parser("bounds", help="evaluate the majority-vote tail bound term by term")
    bnd.add_argument("--p-max", type=float)
    bnd.add_argument("--eta", type=float)
    bnd.add_argument("--n", type=int, required=True)
    bnd.add_argument("--k", type=int, required=True)
    bnd.add_argument("--B", type=int, required=True)
    bnd.add_argument("--cardinality", type=int)
    bnd.add_argument("--pk-file", help="p_k CSV from the pk command; supplies p_max, eta and cardinality")
    bnd.set_defaults(func=cmd_bounds)

    pk = sub.add_parser("pk", help="estimate base-learner output probabilities p_k")
    pk.add_argument("--config", required=True)
    pk.add_argument("--k", type=int, required=True)
    pk.add_argument("--trials", type=int, default=100000)
    pk.add_argument("--seed", type=int)
    pk.add_argument("--out", help="CSV path (default: stdout)")
    pk.set_defaults(func=cmd_pk)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
