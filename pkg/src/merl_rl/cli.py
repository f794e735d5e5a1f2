"""Command line entry point: ``merl-rl {train,ablate,transfer,aggregate,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .diffcore import ConfigurationError
from .gradcheck import run_gradcheck
from .harness import (
    aggregate_seeds,
    format_score,
    group_metrics_files,
    load_config,
    run_ablation,
    run_experiment,
    run_transfer,
    table_row,
)


def _seed_list(text: str) -> list[int]:
    return [int(s) for s in text.replace(",", " ").split()]


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.replace(",", " ").split())


def _config_from_args(args):
    cfg = load_config(args.config, args.override, profile=args.profile)
    changes = {}
    if args.out:
        changes["out_dir"] = args.out
    if getattr(args, "seeds", None):
        changes["seeds"] = args.seeds
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = [args.seed]
    return replace(cfg, **changes) if changes else cfg


def _write_config(cfg, name: str) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    _write_config(cfg, "config.json")
    status = 0
    for seed in cfg.seeds:
        res = run_experiment(cfg, seed)
        print(f"{res.name}: {res.status} updates={res.updates} final_return={res.final_score}")
        status |= res.status != "ok"
    return status


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    _write_config(cfg, "config.json")
    results = run_ablation(cfg, workers=args.workers)
    for res in results:
        print(f"{res.name}: {res.status} final_return={res.final_score}")
    return int(any(r.status != "ok" for r in results))


def cmd_transfer(args) -> int:
    cfg = _config_from_args(args)
    _write_config(cfg, "config.json")
    results = run_transfer(cfg)
    for res in results:
        cont = res.extra.get("continuous")
        extra = "" if cont is None else f" continuity={'ok' if cont else 'BROKEN'}"
        print(f"{res.name}: {res.status} final_return={res.final_score}{extra}")
    bad = any(r.status != "ok" or r.extra.get("continuous") is False for r in results)
    return int(bad)


def cmd_aggregate(args) -> int:
    files = []
    for p in map(Path, args.paths):
        if not p.exists():
            print(f"no such file or directory: {p}", file=sys.stderr)
            return 1
        files.extend(sorted(p.glob("*.metrics.jsonl")) if p.is_dir() else [p])
    if not files:
        print("no metrics files found", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    summaries = {}
    for group, paths in group_metrics_files(files).items():
        s = aggregate_seeds(paths)
        summaries[group] = s
        print(f"{group}: n={len(paths)} final {format_score(s.final_mean, s.final_std)}"
              + (f" ({'; '.join(s.warnings)})" if s.warnings else ""))
        if out:
            (out / f"{group}.csv").write_text(s.csv())
    if args.baseline and args.merl:
        for g in (args.baseline, args.merl):
            if g not in summaries:
                raise ConfigurationError(f"no runs in group {g!r}; have {sorted(summaries)}")
        print("task | baseline | MERL")
        print(table_row(args.task or "task", summaries[args.baseline], summaries[args.merl]))
    if out:
        with open(out / "summary.json", "w") as f:
            json.dump({g: {"runs": len(s.finals), "finals": s.finals, "final_mean": s.final_mean,
                           "final_std": s.final_std, "warnings": s.warnings}
                       for g, s in summaries.items()}, f, indent=1, sort_keys=True)
    return 0


def cmd_gradcheck(args) -> int:
    sizes = {}
    if args.sizes:
        dims = _int_list(args.sizes)
        if len(dims) < 3:
            raise ConfigurationError("--sizes needs obs_dim,hidden...,act_dim")
        sizes = {"obs_dim": dims[0], "hidden": dims[1:-1], "act_dim": dims[-1]}
    report = run_gradcheck(args.seed, args.instances, **sizes)
    for line in report.lines():
        print(line)
    print("gradcheck", "PASSED" if report.passed else "FAILED")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merl-rl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds: str):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--profile", choices=["control", "shared"], help="preset to start from")
        p.add_argument("--out", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, e.g. hyper.lr=1e-3 (repeatable)")
        if seeds == "one":
            p.add_argument("--seed", type=int)
        else:
            p.add_argument("--seeds", type=_seed_list, help="comma separated seeds")

    p = sub.add_parser("train", help="train one configuration")
    common(p, "one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run none / ve / fs / ve_fs for every seed")
    common(p, "many")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", help="train on env_id, switch to transfer_env_id")
    common(p, "many")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("aggregate", help="mean and std across seeds")
    p.add_argument("paths", nargs="+", help="metrics files or directories")
    p.add_argument("--out", help="directory for CSV and summary.json")
    p.add_argument("--baseline", help="group name of the baseline arm, e.g. none")
    p.add_argument("--merl", help="group name of the MERL arm, e.g. ve_fs")
    p.add_argument("--task", help="task label for the table row")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", help="obs_dim,hidden...,act_dim (default 3,5,4,2)")
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
