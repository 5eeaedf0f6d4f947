"""Command-line front end: ``infostate run|list|compare``.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 file-system error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
THREAD_ENV = "INFOSTATE_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="infostate", description="Information-state filtering and control scenarios.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for linear algebra (default: ${THREAD_ENV} or library default)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config file or built-in scenario")
    r.add_argument("config", help="YAML/JSON config path or built-in scenario name")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", default=None, help="output directory (default: config 'output' or runs/<scenario>)")
    sub.add_parser("list", help="list built-in scenarios")
    c = sub.add_parser("compare", help="paired cost difference A - B on common random numbers")
    c.add_argument("config_a")
    c.add_argument("config_b")
    c.add_argument("--seed", type=int, default=None, help="override the seed of both configs")
    c.add_argument("--out", default=None, help="output directory (default: runs/compare)")
    return p


def _set_threads(n):
    if n is None:
        env = os.environ.get(THREAD_ENV)
        if not env:
            return None
        try:
            n = int(env)
        except ValueError:
            raise SystemExit(f"error: {THREAD_ENV}={env!r} is not an integer")
    if n < 1:
        raise SystemExit("error: thread count must be at least 1")
    for var in _BLAS_VARS:
        os.environ[var] = str(n)
    return n


def _fmt(est) -> str:
    if est.exact:
        return f"{est.mean:.6g} (exact)"
    return f"{est.mean:.6g} +- {est.stderr:.3g}"


def _cmd_list(scn) -> int:
    for name, desc in scn.list_scenarios():
        print(f"{name:16s} {desc}")
    return EXIT_OK


def _cmd_run(scn, args, threads) -> int:
    raw = scn.load_config(args.config)
    cfg, defaulted = scn.resolve_config(raw, args.seed)
    out = args.out or cfg.get("output") or os.path.join("runs", cfg["scenario"])
    report = scn.run_config(cfg, defaulted)
    report.timing["threads"] = threads
    path = scn.write_outputs(report, out)
    print(f"{cfg['scenario']}  seed={cfg['seed']}  hash={report.config_hash[:12]}")
    for name, est in report.metrics.items():
        print(f"  {name:22s} {_fmt(est)}")
    for name, val in report.checks.items():
        print(f"  {name:22s} {json.dumps(val, sort_keys=True, default=float)}")
    print(f"  outputs in {path}")
    return EXIT_OK


def _cmd_compare(scn, args, threads) -> int:
    cfg_a, def_a = scn.resolve_config(scn.load_config(args.config_a), args.seed)
    cfg_b, def_b = scn.resolve_config(scn.load_config(args.config_b), args.seed)
    ra, rb, diff = scn.compare_configs(cfg_a, cfg_b)
    out = args.out or os.path.join("runs", "compare")
    os.makedirs(out, exist_ok=True)
    body = {
        "scenario": cfg_a["scenario"],
        "seed": cfg_a["seed"],
        "config_hash_a": ra.config_hash,
        "config_hash_b": rb.config_hash,
        "controller_a": cfg_a["controller"],
        "controller_b": cfg_b["controller"],
        "cost_a": {"mean": ra.metrics["cost"].mean, "stderr": ra.metrics["cost"].stderr},
        "cost_b": {"mean": rb.metrics["cost"].mean, "stderr": rb.metrics["cost"].stderr},
        "difference": {"mean": diff.mean, "stderr": diff.stderr, "n": diff.n},
        "defaulted_a": def_a,
        "defaulted_b": def_b,
        "threads": threads,
    }
    with open(os.path.join(out, "compare.json"), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "compare.csv"), "w") as fh:
        fh.write("quantity,mean,stderr\n")
        for key in ("cost_a", "cost_b", "difference"):
            fh.write(f"{key},{body[key]['mean']!r},{body[key]['stderr']!r}\n")
    print(f"{cfg_a['scenario']}  seed={cfg_a['seed']}")
    print(f"  A {cfg_a['controller']['type']:10s} {_fmt(ra.metrics['cost'])}")
    print(f"  B {cfg_b['controller']['type']:10s} {_fmt(rb.metrics['cost'])}")
    print(f"  A - B        {diff.mean:.6g} +- {diff.stderr:.3g} (paired)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = _set_threads(args.threads)
    # imported late so the thread settings above reach the BLAS runtime
    from . import scenarios as scn
    from .stochastic import NumericalError

    try:
        if args.command == "list":
            return _cmd_list(scn)
        if args.command == "run":
            return _cmd_run(scn, args, threads)
        return _cmd_compare(scn, args, threads)
    except scn.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        step = "" if exc.step is None else f" at step {exc.step}"
        print(f"numerical failure in {type(exc).__module__}{step}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
