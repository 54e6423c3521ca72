"""Command-line entry point: ``mberil <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks
from .evaluation import (METRIC_COLUMNS, ExperimentConfig, build_task, interactions_to_threshold,
                         load_config, metrics_path, run_experiment, run_single, sweep_expert,
                         write_rows)
from .mdp import RegularizationConfig, load_mdp
from .oracle import dump_csv, solve, uniform_baselines
from .trainers import make_expert

DELIM = "-" * 60


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "variant", None):
        cfg.variants = [args.variant]
        cfg.__post_init__()
    return cfg


def cmd_solve(args) -> int:
    mdp = load_mdp(args.mdp)
    reg = RegularizationConfig(**json.loads(args.reg)) if args.reg else RegularizationConfig()
    q0, b0 = uniform_baselines(mdp)
    res = solve(mdp, q0, b0, reg)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    dump_csv(res, mdp, q0, b0, reg, out / "oracle.csv")
    print(DELIM)
    print(f"iterations {res.iterations}")
    print(f"residual {res.residual:.3e}")
    print(f"V {' '.join(f'{v:.6f}' for v in res.values.v)}")
    print(f"table {out / 'oracle.csv'}")
    print(DELIM)
    return 0


def cmd_expert(args) -> int:
    cfg = _config(args)
    task = build_task(cfg)
    seed = cfg.seeds[0]
    buf = task.expert_buffer(cfg.expert_trajectories, cfg.horizon, seed, cfg.reg_config())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"expert_seed{seed}.csv"
    buf.to_csv(path)
    print(DELIM)
    print(f"transitions {len(buf)}")
    print(f"expert_return {task.r_max:.6f}")
    print(f"file {path}")
    print(DELIM)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(cfg)
    variant, seed = cfg.variants[0], cfg.seeds[0]
    _, rows = run_single(cfg, task, variant, seed)
    path = metrics_path(out, variant, seed)
    write_rows(path, METRIC_COLUMNS, rows)
    last = rows[-1]
    print(DELIM)
    print(f"variant {variant} seed {seed}")
    print(f"final_normalized_return {last['normalized_return']:.4f}")
    print(f"interactions_to_{cfg.threshold:g} {interactions_to_threshold(rows, cfg.threshold):g}")
    print(f"metrics {path}")
    print(DELIM)
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg, svg=args.svg)
    print(DELIM)
    for variant in cfg.variants:
        hits = [interactions_to_threshold(res.rows[(variant, s)], cfg.threshold) for s in cfg.seeds]
        finals = [res.rows[(variant, s)][-1]["normalized_return"] for s in cfg.seeds]
        print(f"{variant}: median interactions to {cfg.threshold:g} = {np.median(hits):g}; "
              f"final normalized return mean {np.mean(finals):.4f}")
    print(f"summary {res.summary_file}")
    if res.figure is not None:
        print(f"figure {res.figure}")
    print(DELIM)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    path, rows = sweep_expert(cfg, svg=args.svg)
    print(DELIM)
    for variant in cfg.variants:
        for n in cfg.expert_sizes:
            vals = [r["final_normalized_return"] for r in rows
                    if r["variant"] == variant and r["expert_trajectories"] == n]
            print(f"{variant} trajectories={n}: final normalized return {np.mean(vals):.4f}")
    print(f"table {path}")
    print(DELIM)
    return 0


def cmd_check(args) -> int:
    results = checks.run_all(seed=args.seed or 0)
    print(DELIM)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(DELIM)
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mberil", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if variant:
            sp.add_argument("--variant")
        return sp

    s = sub.add_parser("solve", help="oracle solve of an MDP file")
    s.add_argument("mdp")
    s.add_argument("--reg", help='JSON regularization, e.g. {"kappa": 2, "eta": 2}')
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)
    common(sub.add_parser("expert", help="generate an expert dataset")).set_defaults(func=cmd_expert)
    common(sub.add_parser("train", help="train one variant"), variant=True).set_defaults(
        func=cmd_train)
    c = common(sub.add_parser("compare", help="all variants over all seeds"), variant=True)
    c.add_argument("--svg", action="store_true")
    c.set_defaults(func=cmd_compare)
    w = common(sub.add_parser("sweep-expert", help="final return vs expert dataset size"),
               variant=True)
    w.add_argument("--svg", action="store_true")
    w.set_defaults(func=cmd_sweep)
    k = sub.add_parser("check", help="run the property suites")
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
