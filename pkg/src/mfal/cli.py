"""Command line entry point: ``mfal run | replicate | oracle | list-problems``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

from .benchmarks import builtin_problems, format_reference_line, get_problem, mc_oracle
from .config import ConfigError, load_config
from .rng import stream
from .runner import EXIT_CONFIG, EXIT_OK, replicate, run


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfal", description="Multifidelity active-learning subset simulation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one run config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("replicate", help="repeat a run config over derived seeds")
    p.add_argument("config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("oracle", help="crude Monte Carlo reference estimate")
    p.add_argument("problem")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threshold", type=float)

    sub.add_parser("list-problems", help="list built-in benchmark problems")
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = run(cfg, args.output_dir, args.workers)
    s = out.summary
    print(f"{s['method']} {s['problem']['name']}: pf={s['pf']} cov={s['cov']} calls={s['counters']} "
          f"status={s['status']} -> {out.output_dir}")
    if s["error"]:
        print(s["error"], file=sys.stderr)
    return out.exit_code


def _cmd_replicate(args) -> int:
    cfg = load_config(args.config)
    if args.n < 1:
        raise ConfigError("--n: must be >= 1")
    rep = replicate(cfg, args.n, args.output_dir, args.workers)
    d = rep.to_dict()
    d.pop("runs")
    print(json.dumps(d, sort_keys=True))
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        problem = get_problem(args.problem, args.threshold)
    except KeyError as exc:
        raise ConfigError(f"problem: {exc.args[0]}") from None
    if args.samples < 1:
        raise ConfigError("--samples: must be >= 1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = mc_oracle(problem, args.samples, stream(args.seed, "oracle"), seed=args.seed)
    print(format_reference_line(problem.name, res))
    if res.zero_failures:
        print(f"no failures in {res.n_samples} samples; pf < {res.pf:.3g}", file=sys.stderr)
    return EXIT_OK


def _cmd_list(args) -> int:
    for p in builtin_problems():
        ref = f"{p.oracle_pf:.4e}" if p.oracle_pf is not None else "-"
        print(f"{p.name:18s} d={p.dimension} M={len(p.lf_models)} threshold={p.failure_threshold!r} "
              f"oracle_pf={ref}  {p.description}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": _cmd_run, "replicate": _cmd_replicate, "oracle": _cmd_oracle, "list-problems": _cmd_list}
    try:
        return handler[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
