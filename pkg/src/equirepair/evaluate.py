"""Experiment harness: multi-seed policy evaluation, policy comparison
tables, and per-group coverage/length prediction reports."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conformal import ConformalCalibrator, predict_intervals
from .datagen import Dataset, records_to_arrays
from .domain import EpisodeOutcome, PredictionInterval, SensitiveGroup
from .forest import QuantileForestRegressor
from .metrics import avg_outage, wd_inequity
from .simenv import EnvConfig, RepairEnv


@dataclass
class EvalResult:
    t_outage: float  # mean outage hours over all (episode, region) pairs
    wd_mean: float  # per-episode equity cost, averaged over episodes
    wd_pooled: float  # equity gap of all episodes' samples pooled per group
    outcomes: list[EpisodeOutcome] = field(repr=False, default_factory=list)
    samples_by_group: dict[SensitiveGroup, list[float]] = field(repr=False, default_factory=dict)


def evaluate_policy(
    env_cfg: EnvConfig,
    policy,
    n_episodes: int,
    seed: int = 0,
    jobs: int = 1,
) -> EvalResult:
    """Seeded rollouts; episode seeds derive from (seed, episode index) so
    results do not depend on evaluation order or parallelism."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    seeds = [
        int(np.random.SeedSequence([seed, ep]).generate_state(1)[0])
        for ep in range(n_episodes)
    ]

    def run(ep_seed):
        return RepairEnv(env_cfg).rollout(policy, episode_seed=ep_seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, seeds))
    else:
        outcomes = [run(s) for s in seeds]

    samples: dict[SensitiveGroup, list[float]] = {}
    for outcome in outcomes:
        for rid, hours in outcome.outage_by_region.items():
            samples.setdefault(env_cfg.regions[rid].group, []).append(hours)
    pooled = wd_inequity(samples) if len(samples) >= 2 else 0.0
    return EvalResult(
        t_outage=avg_outage(outcomes),
        wd_mean=float(np.mean([o.cost for o in outcomes])),
        wd_pooled=pooled,
        outcomes=outcomes,
        samples_by_group=samples,
    )


def compare(
    env_cfg: EnvConfig,
    policies: dict[str, object],
    n_episodes: int,
    seeds,
    jobs: int = 1,
) -> list[dict]:
    """Mean +- std of both metrics per policy across evaluation seeds.

    Policies may be shared callables or factories keyed by seed (callable
    taking the seed and returning a policy), which lets checkpointed agents
    be re-instantiated per seed.
    """
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    rows = []
    for name, pol in policies.items():
        t_vals, wd_vals, wd_pooled = [], [], []
        for s in seeds:
            runner = pol(s) if callable(pol) and getattr(pol, "is_factory", False) else pol
            res = evaluate_policy(env_cfg, runner, n_episodes, seed=s, jobs=jobs)
            t_vals.append(res.t_outage)
            wd_vals.append(res.wd_mean)
            wd_pooled.append(res.wd_pooled)
        rows.append(
            {
                "policy": name,
                "t_outage_mean": float(np.mean(t_vals)),
                "t_outage_std": float(np.std(t_vals)),
                "wd_mean": float(np.mean(wd_vals)),
                "wd_std": float(np.std(wd_vals)),
                "wd_pooled_mean": float(np.mean(wd_pooled)),
            }
        )
    return rows


def prediction_report(
    dataset: Dataset,
    methods=("cp", "cqr", "ecqr"),
    alpha: float = 0.9,
    forest_params: dict | None = None,
) -> dict:
    """Fit on the train split, calibrate each method on the calibration
    split, and report per-group coverage and mean interval length on test."""
    if not methods:
        raise ValueError("methods must be nonempty")
    X_tr, y_tr, _, _ = records_to_arrays(dataset.subset("train"))
    X_cal, y_cal, g_cal, _ = records_to_arrays(dataset.subset("cal"))
    X_te, y_te, g_te, _ = records_to_arrays(dataset.subset("test"))
    model = QuantileForestRegressor(**(forest_params or {})).fit(X_tr, y_tr)
    report = {"alpha": alpha, "methods": {}}
    for method in methods:
        cal = ConformalCalibrator(base=model, method=method, alpha=alpha)
        cal.fit(X_cal, y_cal, groups=g_cal)
        coverage = cal.coverage_by_group(X_te, y_te, g_te)
        lengths = cal.mean_length_by_group(X_te, g_te)
        report["methods"][method] = {
            "coverage": {g.name: coverage[g] for g in sorted(coverage)},
            "mean_length": {g.name: lengths[g] for g in sorted(lengths)},
            "coverage_gap": max(coverage.values()) - min(coverage.values()),
        }
    return report


def region_intervals(model, factor, regions) -> dict[int, PredictionInterval]:
    """Calibrated repair-duration interval per region, for the action tokens."""
    X = np.array([r.features for r in regions])
    groups = np.array([int(r.group) for r in regions])
    lo, hi = predict_intervals(model, factor, X, groups)
    return {r.id: PredictionInterval(lo[i], hi[i]) for i, r in enumerate(regions)}


# ---------------------------------------------------------------------------
# results directory layout


def write_comparison(rows: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["policy", "t_outage_mean", "t_outage_std", "wd_mean", "wd_std", "wd_pooled_mean"]
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([row["policy"]] + [repr(row[c]) for c in cols[1:]])
    lines = [f"{'policy':<10} {'T_outage (h)':>16} {'WD_inequity':>16}"]
    for row in rows:
        lines.append(
            f"{row['policy']:<10} "
            f"{row['t_outage_mean']:>8.3f} ± {row['t_outage_std']:<5.3f} "
            f"{row['wd_mean']:>8.3f} ± {row['wd_std']:<5.3f}"
        )
    (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_samples(result: EvalResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["group", "outage_hours"])
        for g in sorted(result.samples_by_group):
            for v in result.samples_by_group[g]:
                w.writerow([int(g), repr(float(v))])


def write_config(config: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(config, f, indent=1, sort_keys=True, default=str)


def write_prediction_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "prediction_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    lines = [f"target coverage alpha = {report['alpha']}"]
    for method, stats in report["methods"].items():
        lines.append(f"[{method}]")
        for g, cov in stats["coverage"].items():
            lines.append(
                f"  {g:<7} coverage {cov:.3f}  mean length {stats['mean_length'][g]:.3f} h"
            )
        lines.append(f"  max coverage gap {stats['coverage_gap']:.3f}")
    (out / "prediction_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
