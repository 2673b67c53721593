"""Command-line entry point: ``splitgp <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from .config import PRESETS, ConfigError, load_config, parse_config, preset
from .diagnostics import epsilon_lambda
from .harness import StageError, bound_constants, bound_table, emit_report, run_experiment
from .config import BoundConfig


def _config(args):
    if getattr(args, "preset", None):
        return parse_config(preset(args.preset))
    if getattr(args, "config", None):
        return load_config(args.config)
    raise ConfigError("pass --config PATH or --preset NAME")


def _add_source(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--config", help="experiment config JSON")
    g.add_argument("--preset", choices=sorted(PRESETS), help="built-in scenario")
    p.add_argument("--out", help="output directory (overrides output_dir)")


def _add_train_flags(p):
    p.add_argument("--seed", type=int, help="run a single seed instead of eval.seeds")
    p.add_argument("--mode", action="append", help="restrict to these modes (repeatable)")
    p.add_argument("--workers", type=int, help="client threads per round")


def cmd_run(args) -> int:
    cfg = _config(args)
    m = run_experiment(cfg, args.out, args.seed, args.mode, args.workers)
    print(f"wrote {len(m.outputs)} files to {args.out or cfg.output_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if cfg.train is None:
        raise ConfigError("train: block missing")
    m = run_experiment(cfg, args.out, args.seed, args.mode, args.workers, evaluate_stage=False)
    print(f"trained; {len(m.outputs)} files in {args.out or cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if cfg.train is None:
        raise ConfigError("train: block missing")
    m = run_experiment(cfg, args.out, args.seed, args.mode, train=False)
    print(f"evaluated; {len(m.outputs)} files in {args.out or cfg.output_dir}")
    return 0


def cmd_latency(args) -> int:
    cfg = _config(args) if (args.config or args.preset) else parse_config(preset("fig3"))
    if cfg.latency is None:
        raise ConfigError("latency: block missing")
    cfg.raw = {k: v for k, v in cfg.raw.items() if k in ("name", "seed", "output_dir", "latency")}
    cfg.train = cfg.bound = None
    run_experiment(cfg, args.out)
    summary = json.loads(open(f"{args.out or cfg.output_dir}/latency/summary.json").read())
    for k in ("tau_client_full", "tau_server_full", "tau_splitgp", "pc_threshold"):
        print(f"{k}: {summary[k]}")
    print(f"rate_threshold_exact: {summary['rate_threshold_exact']}")
    return 0


def cmd_bound(args) -> int:
    b = BoundConfig(L=args.L, G=args.G, sigma=[args.sigma] * args.clients, c=args.c, eta0=args.eta0,
                    F0=args.F0, F_star=args.F_star, lam=args.lam)
    bc = bound_constants(b)
    print(f"epsilon({args.lam:g}) = {epsilon_lambda(args.lam, args.c, args.G, args.L)!r}")
    print("T,Gamma_T,bound_rhs")
    for T, gamma, rhs in bound_table(bc, args.lam, args.T):
        print(f"{T},{gamma!r},{rhs!r}")
    return 0


def cmd_report(args) -> int:
    summary = emit_report(args.run_dir)
    print(open(f"{args.run_dir}/summary.txt").read(), end="")
    return 0 if summary is not None else 1


def cmd_show(args) -> int:
    print(json.dumps(preset(args.preset), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitgp", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train, evaluate and report in one go")
    _add_source(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train every requested mode and save checkpoints")
    _add_source(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved checkpoints over the rho list and threshold grid")
    _add_source(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", action="append")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("latency", help="analytic latency table and sweeps (defaults to the fig3 preset)")
    _add_source(p)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("bound", help="evaluate epsilon(lambda) and the convergence bound")
    p.add_argument("--lam", type=float, default=0.2)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--L", type=float, default=1.0)
    p.add_argument("--G", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0, help="per-client sigma_k (same for all)")
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--eta0", type=float, default=1.0)
    p.add_argument("--F0", type=float, default=math.log(10))
    p.add_argument("--F-star", dest="F_star", type=float, default=0.0)
    p.add_argument("--T", type=int, nargs="+", default=[1000, 1_000_000])
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("report", help="summarise a finished run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("show-config", help="print a preset as JSON (a starting point for --config)")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_show)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
