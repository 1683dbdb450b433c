"""``adept`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .dataset import generate_dataset, save_dataset
from .errors import ConfigError, ContractError, FormatError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _out_path(arg: str | None, default: str) -> Path:
    """Relative output paths land under ADEPT_OUT when it is set."""
    p = Path(arg or default)
    root = os.environ.get("ADEPT_OUT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--profile", choices=("paper", "desk"), help="preset applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def _config(args):
    return load_config(args.config, args.overrides, args.profile)


def cmd_gen_data(args) -> int:
    ds = generate_dataset(args.env, args.tier, args.n, np.random.default_rng(args.seed))
    out = _out_path(args.out, "data.ads")
    save_dataset(ds, out)
    print(f"wrote {len(ds)} transitions ({ds.env_name}, {ds.tier}) to {out}")
    return EXIT_OK


def cmd_train_wm(args) -> int:
    from .harness import train_wm_only

    cfg = _config(args)
    trainer, _ = train_wm_only(cfg)
    print(f"wrote {cfg.resolved_out_dir() / 'world_model.ckpt'}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .harness import run_adept

    cfg = _config(args)
    rec = run_adept(cfg)
    print(f"{len(rec.rows)} epochs; final return {rec.final('eval_return_mean'):.3f}; metrics in {rec.metrics_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import parse_sweep, run_ablation

    cfg = _config(args)
    recs = run_ablation(cfg, parse_sweep(args.sweep))
    for r in recs:
        print(f"{r.run_id}: final return {r.final('eval_return_mean'):.3f}")
    print(f"summary in {cfg.resolved_out_dir() / 'ablation.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .envs import make_env
    from .harness import load_policy
    from .learners import evaluate_policy

    policy, stats = load_policy(args.policy)
    env = make_env(args.env)
    mean, std = evaluate_policy(policy, env, args.episodes, np.random.default_rng(args.seed), stats=stats,
                                deterministic=not args.stochastic)
    print(f"return {mean:.4f} +- {std:.4f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    from .bounds import verify_bounds

    out = _out_path(args.out, "report.csv")
    rows = verify_bounds(args.trials, args.seed, args.gamma, out)
    bad = sum(r["violated"] for r in rows)
    print(f"{len(rows)} trials, {bad} violations; report in {out}")
    return EXIT_OK if bad == 0 else EXIT_NUMERIC


def cmd_plot_export(args) -> int:
    from .harness import plot_export, read_metrics

    runs = []
    for d in args.runs:
        d = Path(d)
        path = d / "metrics.csv" if d.is_dir() else d
        if not path.exists():
            raise FileNotFoundError(path)
        runs.append((d.name if d.is_dir() else d.stem, read_metrics(path)))
    out = plot_export(runs, _out_path(args.out, "series.csv"), args.metric or None)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adept", description="Diffusion world-model offline RL experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset file")
    p.add_argument("--env", default="point-mass-2d")
    p.add_argument("--tier", default="random", choices=("random", "medium", "mixed"))
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-wm", help="behavior cloning plus world-model initialization only")
    _add_config_args(p)
    p.set_defaults(func=cmd_train_wm)

    p = sub.add_parser("run", help="full training loop")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="grid of runs sharing one seed")
    _add_config_args(p)
    p.add_argument("--sweep", action="append", required=True, metavar="KEY=V1,V2",
                   help="one swept key (repeatable; the grid is the product)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a saved policy in the true environment")
    p.add_argument("--policy", required=True)
    p.add_argument("--env", default="point-mass-2d")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stochastic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-bounds", help="randomized check of the return-gap bound")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--gamma", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("plot-export", help="merge run metrics into one long-format CSV")
    p.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    p.add_argument("--metric", action="append", default=[])
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        handlers=[console])
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError) as exc:
        where = f" (epoch {exc.epoch}, phase {exc.phase})" if hasattr(exc, "phase") else ""
        print(f"numeric failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
