"""Command-line entry point.

Subcommands: run, eta-search, summarize, dump-instance. Exit codes: 0 on
success, 1 when any cell failed, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    ExperimentConfig,
    RunRow,
    ResultTable,
    build_instance,
    eta_search,
    load_config,
    preset_path,
    run_experiment,
    summarize,
)

EXIT_OK = 0
EXIT_CELL_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = load_config(preset_path(args.preset))
    else:
        raise ConfigError("one of --config or --preset is required")
    updates = {}
    if getattr(args, "out", None):
        updates["output_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        updates["seeds"] = (int(args.seed),)
    if updates:
        config = dataclasses.replace(config, **updates)
    return config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a YAML experiment config")
    parser.add_argument(
        "--preset",
        help="bundled preset name (synthetic-n2|synthetic-n10|power|aloha)",
    )
    parser.add_argument("--seed", type=int, help="restrict the sweep to one seed")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--parallel", type=int, default=1, metavar="K", help="cells in flight")


def _cmd_run(args) -> int:
    config = _resolve_config(args)
    table = run_experiment(config, parallel=args.parallel, progress=lambda s: print(s, flush=True))
    print(f"{len(table.rows)} runs -> {config.output_dir}/results.csv")
    if table.failures:
        print(f"{len(table.failures)} cells failed; see failures.json", file=sys.stderr)
        return EXIT_CELL_FAILURE
    return EXIT_OK


def _cmd_eta_search(args) -> int:
    config = _resolve_config(args)
    best = eta_search(config, parallel=args.parallel)
    for budget, eta in sorted(best.items()):
        print(f"lambda={budget:g}: best eta={eta:g}")
    print(f"surface -> {config.output_dir}/surface.csv")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    tables = []
    for path in args.results:
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    RunRow(
                        policy=rec["policy"],
                        budget=float(rec["lambda"]),
                        eta=float(rec["eta"]),
                        seed=int(rec["seed"]),
                        simple_regret=float(rec["simple_regret"]),
                        cum_regret=float(rec["cum_regret"]),
                        episodes=int(rec["episodes"]),
                        spend=float(rec["spend"]),
                        wallclock_ms=float(rec["wallclock_ms"]),
                    )
                )
        tables.append(ResultTable(rows=rows))
    try:
        report = summarize(tables)
    except (KeyError, ValueError) as exc:
        print(f"summarize failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    writer = csv.DictWriter(
        sys.stdout,
        fieldnames=list(report[0].keys())
        if report
        else ["policy", "lambda", "runs"],
    )
    writer.writeheader()
    writer.writerows(report)
    violations = sum(r["budget_violations"] for r in report)
    if violations:
        print(f"BUDGET VIOLATIONS: {violations}", file=sys.stderr)
        return EXIT_CELL_FAILURE
    return EXIT_OK


def _cmd_dump_instance(args) -> int:
    config = _resolve_config(args)
    seed = args.seed if args.seed is not None else config.seeds[0]
    instance = build_instance(config, config.budgets[0], config.etas[0], seed)
    payload = {
        "metadata": instance.metadata,
        "spec": {
            "players": instance.spec.num_players,
            "fidelities": instance.spec.num_fidelities,
            "costs": list(instance.spec.costs),
            "budget": instance.spec.budget,
            "eta": instance.spec.eta,
            "delta": instance.spec.delta,
            "rkhs_bound": instance.spec.rkhs_bound,
            "sigma2": instance.spec.sigma2,
            "dissatisfaction_bound": instance.spec.dissatisfaction_bound,
            "action_counts": list(instance.spec.action_counts),
            "grids": [g.tolist() for g in instance.spec.action_grids],
        },
    }
    table = getattr(instance.oracle, "true_utility_table", None)
    if table is not None and instance.spec.num_profiles <= 2**16:
        payload["truth"] = [
            np.asarray(table(n)).tolist() for n in range(instance.spec.num_players)
        ]
    text = json.dumps(payload)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"instance -> {args.out}")
    else:
        print(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfpne",
        description="Budgeted multi-fidelity equilibrium search experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a (policy, budget, eta, seed) sweep")
    _add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_eta = sub.add_parser("eta-search", help="exhaustive eta search per budget")
    _add_common(p_eta)
    p_eta.set_defaults(func=_cmd_eta_search)

    p_sum = sub.add_parser("summarize", help="aggregate one or more results.csv files")
    p_sum.add_argument("results", nargs="+", help="results.csv paths")
    p_sum.set_defaults(func=_cmd_summarize)

    p_dump = sub.add_parser("dump-instance", help="serialize a replayable instance")
    _add_common(p_dump)
    p_dump.set_defaults(func=_cmd_dump_instance)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
