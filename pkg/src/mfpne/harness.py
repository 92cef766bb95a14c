"""Experiment orchestration: config parsing, seed sweeps, persistence, summaries.

A config names one testbed and the (policy, budget, eta, seed) matrix to run.
Cells are independent and deterministic; failures are recorded per cell and do
not abort the sweep. Outputs: runs/*.json full traces, results.csv with the
stable per-run schema, failures.json when anything broke, and sse.csv for the
power testbed.
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .acquisition import COST_UNIT
from .policies import POLICIES, RunResult, run_policy
from .testbeds import aloha, power, synthetic
from .testbeds.base import Instance

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "preset_path",
    "RunRow",
    "ResultTable",
    "run_experiment",
    "eta_search",
    "summarize",
    "RESULT_COLUMNS",
]

RESULT_COLUMNS = (
    "policy",
    "lambda",
    "eta",
    "seed",
    "simple_regret",
    "cum_regret",
    "episodes",
    "spend",
    "wallclock_ms",
)

TESTBEDS = ("synthetic-n2", "synthetic-n10", "power", "aloha")


class ConfigError(ValueError):
    """Config file malformed, inconsistent, or carrying unknown keys."""


@dataclass(frozen=True)
class ExperimentConfig:
    testbed: str
    policies: tuple[str, ...]
    budgets: tuple[float, ...]
    etas: tuple[float, ...]
    seeds: tuple[int, ...]
    output_dir: str = "out"
    testbed_params: dict = field(default_factory=dict)
    policy_overrides: dict = field(default_factory=dict)
    include_truth: str = "auto"

    def cells(self) -> list[tuple[str, float, float, int]]:
        return [
            (p, b, e, s)
            for p in self.policies
            for b in self.budgets
            for e in self.etas
            for s in self.seeds
        ]


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _require_keys(
        raw,
        {
            "testbed",
            "policies",
            "budgets",
            "etas",
            "seeds",
            "output_dir",
            "testbed_params",
            "policy_overrides",
            "include_truth",
        },
        "config root",
    )
    testbed = raw.get("testbed")
    if testbed not in TESTBEDS:
        raise ConfigError(f"testbed must be one of {TESTBEDS}, got {testbed!r}")
    policies = tuple(raw.get("policies", ()))
    if not policies or any(p not in POLICIES for p in policies):
        raise ConfigError(f"policies must be a nonempty subset of {sorted(POLICIES)}")
    budgets = tuple(float(b) for b in raw.get("budgets", ()))
    if not budgets or any(b <= 0 for b in budgets):
        raise ConfigError("budgets must be positive")
    etas = tuple(float(e) for e in raw.get("etas", ()))
    if not etas:
        raise ConfigError("at least one eta required")
    seeds_raw = raw.get("seeds")
    if isinstance(seeds_raw, dict):
        _require_keys(seeds_raw, {"start", "count"}, "seeds")
        start = int(seeds_raw.get("start", 0))
        count = int(seeds_raw["count"])
        seeds = tuple(range(start, start + count))
    elif isinstance(seeds_raw, (list, tuple)):
        seeds = tuple(int(s) for s in seeds_raw)
    else:
        raise ConfigError("seeds must be a list or {start, count}")
    if not seeds:
        raise ConfigError("at least one seed required")
    include_truth = raw.get("include_truth", "auto")
    if include_truth not in ("auto", "always", "never"):
        raise ConfigError("include_truth must be auto, always, or never")
    testbed_params = raw.get("testbed_params", {}) or {}
    overrides = raw.get("policy_overrides", {}) or {}
    _require_keys(
        overrides,
        {"max_candidates", "gamma_points", "pe_samples", "pe_features", "pe_exact_limit"},
        "policy_overrides",
    )
    return ExperimentConfig(
        testbed=testbed,
        policies=policies,
        budgets=budgets,
        etas=etas,
        seeds=seeds,
        output_dir=str(raw.get("output_dir", "out")),
        testbed_params=dict(testbed_params),
        policy_overrides=dict(overrides),
        include_truth=include_truth,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return parse_config(raw)


def preset_path(name: str) -> Path:
    path = Path(__file__).parent / "presets" / f"{name}.yaml"
    if not path.exists():
        available = sorted(p.stem for p in path.parent.glob("*.yaml"))
        raise ConfigError(f"unknown preset {name!r}; available: {available}")
    return path


_SYNTH_N2_KEYS = {"well_specified", "grid_points", "delta", "rkhs_bound", "sigma2"}
_SYNTH_N10_KEYS = {"grid_points", "delta", "rkhs_bound", "sigma2", "reference_samples"}
_POWER_KEYS = {
    "num_links",
    "grid_points",
    "power_db_min",
    "power_db_max",
    "noise_power_db",
    "interference_gain_db",
    "penalty",
    "raw_costs",
    "truth_samples",
    "delta",
    "rkhs_bound",
    "reference_samples",
}
_ALOHA_KEYS = {
    "num_terminals",
    "grid_points_per_axis",
    "energy_caps",
    "xi",
    "omega",
    "raw_costs",
    "sigma2",
    "delta",
    "rkhs_bound",
    "max_candidates",
}


def build_instance(config: ExperimentConfig, budget: float, eta: float, seed: int) -> Instance:
    params = dict(config.testbed_params)
    if config.testbed == "synthetic-n2":
        _require_keys(params, _SYNTH_N2_KEYS, "testbed_params")
        return synthetic.make_instance(seed=seed, budget=budget, eta=eta, **params)
    if config.testbed == "synthetic-n10":
        _require_keys(params, _SYNTH_N10_KEYS, "testbed_params")
        return synthetic.make_instance_n10(seed=seed, budget=budget, eta=eta, **params)
    if config.testbed == "power":
        _require_keys(params, _POWER_KEYS, "testbed_params")
        game_keys = {
            k: params.pop(k)
            for k in list(params)
            if k in _POWER_KEYS - {"delta", "rkhs_bound", "reference_samples"}
        }
        if "raw_costs" in game_keys:
            game_keys["raw_costs"] = tuple(game_keys["raw_costs"])
        pp = power.PowerParams(**game_keys) if game_keys else None
        return power.make_instance(seed=seed, budget=budget, eta=eta, params=pp, **params)
    if config.testbed == "aloha":
        _require_keys(params, _ALOHA_KEYS, "testbed_params")
        game_keys = {
            k: params.pop(k)
            for k in list(params)
            if k in _ALOHA_KEYS - {"delta", "rkhs_bound", "max_candidates"}
        }
        for tup_key in ("energy_caps", "omega", "raw_costs"):
            if tup_key in game_keys:
                game_keys[tup_key] = tuple(game_keys[tup_key])
        ap = aloha.AlohaParams(**game_keys) if game_keys else None
        return aloha.make_instance(seed=seed, budget=budget, eta=eta, params=ap, **params)
    raise ConfigError(f"unhandled testbed {config.testbed}")


def _apply_overrides(instance: Instance, overrides: dict) -> None:
    if overrides:
        from dataclasses import replace

        instance.policy_config = replace(instance.policy_config, **overrides)


@dataclass
class RunRow:
    policy: str
    budget: float
    eta: float
    seed: int
    simple_regret: float
    cum_regret: float
    episodes: int
    spend: float
    wallclock_ms: float

    def as_csv_row(self) -> list[str]:
        return [
            self.policy,
            f"{self.budget:g}",
            f"{self.eta:g}",
            str(self.seed),
            f"{self.simple_regret:.10g}",
            f"{self.cum_regret:.10g}",
            str(self.episodes),
            f"{self.spend:.10g}",
            f"{self.wallclock_ms:.3f}",
        ]


@dataclass
class ResultTable:
    rows: list[RunRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    sse_rows: list[dict] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RESULT_COLUMNS)
            for row in self.rows:
                writer.writerow(row.as_csv_row())

    def budget_violations(self) -> int:
        return sum(1 for r in self.rows if r.spend > r.budget + 1e-9)


def _truth_payload(instance: Instance, include: str) -> dict | None:
    spec = instance.spec
    small = spec.num_players == 2 and spec.num_profiles <= 2**16
    if include == "never" or (include == "auto" and not small):
        return None
    table = getattr(instance.oracle, "true_utility_table", None)
    if table is None:
        return None
    return {
        "grids": [g.tolist() for g in spec.action_grids],
        "utilities": [np.asarray(table(n)).tolist() for n in range(spec.num_players)],
        "eps_star": instance.scorer.eps_star,
        "eps_star_profile": instance.metadata.get("eps_star_profile"),
    }


def _power_sse(instance: Instance, result: RunResult) -> float:
    """Largest sum spectral efficiency among evaluated profiles."""
    game = instance.oracle
    best = -math.inf
    seen = set()
    for ep in result.episodes:
        profile = tuple(ep.final_profile)
        if profile in seen:
            continue
        seen.add(profile)
        total = 0.0
        for n in range(instance.spec.num_players):
            se = game.true_utility(n, profile) + game.params.penalty * game.powers_lin[profile[n]]
            total += se
        best = max(best, total)
    return best


def run_cell(
    config: ExperimentConfig, policy: str, budget: float, eta: float, seed: int
) -> tuple[RunRow, RunResult, Instance]:
    instance = build_instance(config, budget, eta, seed)
    _apply_overrides(instance, config.policy_overrides)
    result = run_policy(policy, instance.spec, instance.oracle, instance.scorer, seed, instance.policy_config)
    # spend is reported in the configured budget's units (raw ladder units for
    # the wireless testbeds, top-fidelity units otherwise)
    scale = float(instance.metadata.get("budget_scale", 1.0))
    row = RunRow(
        policy=policy,
        budget=budget,
        eta=eta,
        seed=seed,
        simple_regret=result.simple_regret,
        cum_regret=result.cum_regret,
        episodes=len(result.episodes),
        spend=result.spend * scale,
        wallclock_ms=result.wallclock_ms,
    )
    return row, result, instance


def _cell_worker(args: tuple) -> tuple:
    config_dict, cell = args
    config = ExperimentConfig(**config_dict)
    policy, budget, eta, seed = cell
    try:
        row, result, instance = run_cell(config, policy, budget, eta, seed)
        payload = {
            "run": result.to_dict(),
            "instance": instance.metadata,
            "spec": {
                "players": instance.spec.num_players,
                "fidelities": instance.spec.num_fidelities,
                "costs": list(instance.spec.costs),
                "budget": instance.spec.budget,
                "eta": instance.spec.eta,
                "delta": instance.spec.delta,
                "dissatisfaction_bound": instance.spec.dissatisfaction_bound,
                "action_counts": list(instance.spec.action_counts),
            },
        }
        truth = _truth_payload(instance, config.include_truth)
        if truth is not None:
            payload["truth"] = truth
        sse = None
        if config.testbed == "power":
            sse = _power_sse(instance, result)
        return ("ok", cell, row, payload, sse)
    except Exception:
        return ("error", cell, traceback.format_exc(), None, None)


def _config_as_dict(config: ExperimentConfig) -> dict:
    return {
        "testbed": config.testbed,
        "policies": config.policies,
        "budgets": config.budgets,
        "etas": config.etas,
        "seeds": config.seeds,
        "output_dir": config.output_dir,
        "testbed_params": config.testbed_params,
        "policy_overrides": config.policy_overrides,
        "include_truth": config.include_truth,
    }


def run_experiment(
    config: ExperimentConfig,
    parallel: int = 1,
    progress: Callable[[str], None] | None = None,
) -> ResultTable:
    out = Path(config.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    cells = config.cells()
    table = ResultTable()
    jobs = [(_config_as_dict(config), cell) for cell in cells]
    if parallel > 1:
        ctx = get_context("spawn")
        with ctx.Pool(parallel) as pool:
            outcomes = pool.map(_cell_worker, jobs)
    else:
        outcomes = map(_cell_worker, jobs)
    for outcome in outcomes:
        status, cell, payload_a, payload_b, sse = outcome
        policy, budget, eta, seed = cell
        label = f"{policy}-L{budget:g}-eta{eta:g}-seed{seed}"
        if status == "error":
            table.failures.append({"cell": list(cell), "traceback": payload_a})
            if progress:
                progress(f"FAIL {label}")
            continue
        row, payload = payload_a, payload_b
        table.rows.append(row)
        with open(out / "runs" / f"{label}.json", "w") as fh:
            json.dump(payload, fh)
        if sse is not None and math.isfinite(sse):
            table.sse_rows.append(
                {
                    "psi_db": payload["instance"].get("psi_db"),
                    "policy": policy,
                    "lambda": budget,
                    "eta": eta,
                    "seed": seed,
                    "sse": sse,
                }
            )
        if progress:
            progress(f"done {label} regret={row.simple_regret:.4f}")
    table.write_csv(out / "results.csv")
    if table.failures:
        with open(out / "failures.json", "w") as fh:
            json.dump(table.failures, fh, indent=2)
    if table.sse_rows:
        with open(out / "sse.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["psi_db", "policy", "lambda", "eta", "seed", "sse"]
            )
            writer.writeheader()
            writer.writerows(table.sse_rows)
    summary = summarize([table])
    _write_summary_csv(out / "aggregate.csv", summary)
    return table


def eta_search(
    config: ExperimentConfig,
    parallel: int = 1,
    runner: Callable[[ExperimentConfig, str, float, float, int], float] | None = None,
) -> dict[float, float]:
    """Best eta per budget by mean simple regret of the multi-fidelity policy.

    `runner` injects a custom (config, policy, budget, eta, seed) -> regret
    callable; the default runs the real cells. Writes surface.csv.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = "mf-ucb-pne"

    means: dict[tuple[float, float], float] = {}
    if runner is None:
        scoped = ExperimentConfig(**{**_config_as_dict(config), "policies": (policy,)})
        table = run_experiment(scoped, parallel=parallel)
        for budget in config.budgets:
            for eta in config.etas:
                vals = [
                    r.simple_regret
                    for r in table.rows
                    if r.budget == budget and r.eta == eta
                ]
                if vals:
                    means[(budget, eta)] = float(np.mean(vals))
    else:
        for budget in config.budgets:
            for eta in config.etas:
                vals = [runner(config, policy, budget, eta, s) for s in config.seeds]
                means[(budget, eta)] = float(np.mean(vals))

    best: dict[float, float] = {}
    for budget in config.budgets:
        candidates = [(means[(budget, eta)], eta) for eta in config.etas if (budget, eta) in means]
        if candidates:
            best[budget] = min(candidates)[1]
    with open(out / "surface.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eta", "lambda", "mean_simple_regret", "is_best"])
        for (budget, eta), val in sorted(means.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            writer.writerow([f"{eta:g}", f"{budget:g}", f"{val:.10g}", int(best.get(budget) == eta)])
    return best


def summarize(tables: list[ResultTable]) -> list[dict]:
    """Mean and 5th/95th percentile bands per (policy, budget); flags overruns."""
    if not tables:
        raise ValueError("at least one table required")
    rows = [r for t in tables for r in t.rows]
    groups: dict[tuple[str, float], list[RunRow]] = {}
    for r in rows:
        groups.setdefault((r.policy, r.budget), []).append(r)
    report = []
    for (policy, budget), members in sorted(groups.items()):
        regrets = np.array([m.simple_regret for m in members])
        cums = np.array([m.cum_regret for m in members])
        report.append(
            {
                "policy": policy,
                "lambda": budget,
                "runs": len(members),
                "simple_regret_mean": float(regrets.mean()),
                "simple_regret_p5": float(np.percentile(regrets, 5)),
                "simple_regret_p95": float(np.percentile(regrets, 95)),
                "cum_regret_mean": float(cums.mean()),
                "cum_regret_p5": float(np.percentile(cums, 5)),
                "cum_regret_p95": float(np.percentile(cums, 95)),
                "budget_violations": sum(
                    1 for m in members if m.spend > m.budget + 1e-9
                ),
            }
        )
    return report


def _write_summary_csv(path: Path, report: list[dict]) -> None:
    if not report:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["policy", "lambda", "runs"])
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(report[0].keys()))
        writer.writeheader()
        writer.writerows(report)
