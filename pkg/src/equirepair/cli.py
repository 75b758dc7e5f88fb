"""Command-line entry point wiring the pipeline stages together.

A single output directory accumulates the pipeline artifacts:

    equirepair gen-data        --out run
    equirepair train-predictor --out run
    equirepair calibrate       --out run --method ecqr --alpha 0.9
    equirepair predict-report  --out run
    equirepair train-agent     --out run
    equirepair evaluate        --out run --policy stasac
    equirepair compare         --out run

Every subcommand reads an optional JSON config file (sections: datagen,
forest, conformal, env, training, eval), applies CLI flag overrides, and
writes the fully-resolved configuration to <out>/config.json.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import functools
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click

from . import agent as agent_mod
from . import baselines, datagen, evaluate as eval_mod
from .conformal import (
    METHODS,
    append_calibration,
    calibrate,
    load_calibration,
)
from .datagen import GeneratorConfig, ParseError, SchemaError, records_to_arrays
from .domain import SensitiveGroup
from .forest import QuantileForestRegressor, load_forest, save_forest
from .simenv import InvalidConfigError, TravelModel, env_from_dataset, load_instance, save_instance

CONFIG_ERROR, DATA_ERROR, RUNTIME_ERROR = 2, 3, 4

_SECTIONS = ("datagen", "forest", "conformal", "env", "training", "eval")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    unknown = set(cfg) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; known: {_SECTIONS}")
    return cfg


def _group_map(raw: dict, cast) -> dict:
    out = {}
    for key, value in raw.items():
        try:
            group = (
                SensitiveGroup(int(key))
                if str(key).lstrip("-").isdigit()
                else SensitiveGroup[str(key).upper()]
            )
        except (KeyError, ValueError) as e:
            raise ConfigError(f"unknown sensitive group {key!r}") from e
        out[group] = cast(value)
    return out


def _generator_config(section: dict, seed) -> GeneratorConfig:
    section = dict(section)
    section.pop("fractions", None)
    for key in ("samples_per_region_by_group", "request_rate_by_group"):
        if key in section:
            section[key] = _group_map(section[key], int)
    if "noise_scale_by_group" in section:
        section["noise_scale_by_group"] = _group_map(section["noise_scale_by_group"], float)
    if "base_duration_range" in section:
        section["base_duration_range"] = tuple(section["base_duration_range"])
    if seed is not None:
        section["seed"] = seed
    try:
        return GeneratorConfig(**section).validate()
    except TypeError as e:
        raise ConfigError(f"bad datagen section: {e}") from e


def _training_config(section: dict, seed) -> agent_mod.TrainingConfig:
    section = dict(section)
    if seed is not None:
        section["seed"] = seed
    try:
        return agent_mod.TrainingConfig(**section).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad training section: {e}") from e


def _forest_params(section: dict) -> dict:
    allowed = {"n_trees", "min_leaf", "max_depth", "feature_subsample", "seed"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown forest keys {sorted(unknown)}")
    return dict(section)


def _env_section(section: dict) -> dict:
    allowed = {"speed_kmh", "prune_max_km", "d_limit", "depot", "sampler_seed"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown env keys {sorted(unknown)}")
    return dict(section)


def _dataset_paths(data_dir: Path):
    records = data_dir / "records.csv"
    regions = data_dir / "regions.csv"
    if not records.exists() or not regions.exists():
        raise DataError(f"no dataset in {data_dir}; run gen-data first")
    return records, regions


def _load_dataset(data_dir: Path):
    records, regions = _dataset_paths(data_dir)
    return datagen.load_csv(records, regions)


def _build_env_cfg(data_dir: Path, env_section: dict, intervals=None):
    instance = data_dir / "instance.json"
    if instance.exists():
        cfg = load_instance(instance)
        overrides = {}
        if "speed_kmh" in env_section:
            overrides["travel"] = TravelModel(env_section["speed_kmh"])
        if "prune_max_km" in env_section:
            prune = env_section["prune_max_km"]
            overrides["prune_max_km"] = math.inf if prune is None else prune
        if "d_limit" in env_section:
            overrides["d_limit"] = env_section["d_limit"]
        if "depot" in env_section:
            overrides["depot"] = tuple(env_section["depot"])
        if "sampler_seed" in env_section:
            overrides["sampler_seed"] = env_section["sampler_seed"]
        if intervals is not None:
            overrides["intervals"] = intervals
        return replace(cfg, **overrides) if overrides else cfg
    dataset = _load_dataset(data_dir)
    prune = env_section.get("prune_max_km")
    return env_from_dataset(
        dataset,
        travel=TravelModel(env_section.get("speed_kmh", 40.0)),
        prune_max_km=math.inf if prune is None else prune,
        d_limit=env_section.get("d_limit", 8.0),
        depot=tuple(env_section.get("depot", (0.0, 0.0))),
        sampler_seed=env_section.get("sampler_seed", 0),
        intervals=intervals,
    )


def _write_resolved_config(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    eval_mod.write_config({"command": command, **resolved}, out)


def _mapped_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(CONFIG_ERROR)
        except (DataError, ParseError, SchemaError, FileNotFoundError) as e:
            click.echo(f"data error: {e}", err=True)
            sys.exit(DATA_ERROR)
        except (InvalidConfigError, ValueError, TypeError) as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(CONFIG_ERROR)
        except Exception as e:  # pragma: no cover - defensive
            click.echo(f"runtime error: {e}", err=True)
            sys.exit(RUNTIME_ERROR)

    return wrapper


def common_options(fn):
    fn = click.option("--seed", type=int, default=None, help="override the section seed")(fn)
    fn = click.option(
        "--out", type=click.Path(path_type=Path), default=Path("results/run"), show_default=True
    )(fn)
    fn = click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)(fn)
    return fn


@click.group()
def main():
    """Equity-aware predict-then-optimize power restoration pipeline."""


@main.command("gen-data")
@common_options
@_mapped_errors
def gen_data(seed, out, config_path):
    """Write the synthetic dataset (records.csv, regions.csv, instance.json)."""
    cfg_file = _load_config(config_path)
    gen_cfg = _generator_config(cfg_file.get("datagen", {}), seed)
    fractions = tuple(cfg_file.get("datagen", {}).get("fractions", datagen.DEFAULT_FRACTIONS))
    dataset = datagen.generate(gen_cfg)
    if fractions != datagen.DEFAULT_FRACTIONS:
        dataset = datagen.split(dataset, fractions, seed=gen_cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    datagen.save_csv(dataset, out / "records.csv", out / "regions.csv")
    env_section = _env_section(cfg_file.get("env", {}))
    env_cfg = env_from_dataset(
        dataset,
        travel=TravelModel(env_section.get("speed_kmh", 40.0)),
        prune_max_km=math.inf
        if env_section.get("prune_max_km") is None
        else env_section["prune_max_km"],
        d_limit=env_section.get("d_limit", 8.0),
        depot=tuple(env_section.get("depot", (0.0, 0.0))),
        sampler_seed=env_section.get("sampler_seed", 0),
    )
    save_instance(env_cfg, out / "instance.json")
    resolved = {
        "datagen": {**asdict(gen_cfg), "fractions": list(fractions)},
        "env": env_section,
    }
    _write_resolved_config(out, "gen-data", resolved)
    click.echo(f"wrote {len(dataset.records)} records over {gen_cfg.n_regions} regions to {out}")


@main.command("train-predictor")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None, help="dataset dir (default: --out)")
@_mapped_errors
def train_predictor(seed, out, config_path, data):
    """Fit the quantile forest on the train split; writes qrf.ckpt."""
    cfg_file = _load_config(config_path)
    params = _forest_params(cfg_file.get("forest", {}))
    if seed is not None:
        params["seed"] = seed
    dataset = _load_dataset(data or out)
    X, y, _, _ = records_to_arrays(dataset.subset("train"))
    model = QuantileForestRegressor(**params).fit(X, y)
    out.mkdir(parents=True, exist_ok=True)
    save_forest(model, out / "qrf.ckpt")
    _write_resolved_config(out, "train-predictor", {"forest": model.get_params()})
    click.echo(f"fitted {model.n_trees} trees on {len(y)} records -> {out / 'qrf.ckpt'}")


@main.command("calibrate")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.option("--alpha", type=float, default=None)
@_mapped_errors
def calibrate_cmd(seed, out, config_path, data, method, alpha):
    """Compute the conformal factor on the calibration split; appends CAL1."""
    cfg_file = _load_config(config_path)
    section = cfg_file.get("conformal", {})
    method = method or section.get("method", "ecqr")
    alpha = alpha if alpha is not None else section.get("alpha", 0.9)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}")
    ckpt = out / "qrf.ckpt"
    if not ckpt.exists():
        raise DataError(f"no predictor checkpoint at {ckpt}; run train-predictor first")
    model = load_forest(ckpt)
    dataset = _load_dataset(data or out)
    X, y, groups, _ = records_to_arrays(dataset.subset("cal"))
    factor = calibrate(model, X, y, groups=groups, alpha=alpha, method=method)
    append_calibration(ckpt, factor)
    _write_resolved_config(out, "calibrate", {"conformal": {"method": method, "alpha": alpha}})
    click.echo(f"appended {method} factor at alpha={alpha} to {ckpt}")


@main.command("predict-report")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--alpha", type=float, default=None)
@_mapped_errors
def predict_report_cmd(seed, out, config_path, data, alpha):
    """Per-group coverage and interval-length tables for cp/cqr/ecqr."""
    cfg_file = _load_config(config_path)
    section = cfg_file.get("conformal", {})
    alpha = alpha if alpha is not None else section.get("alpha", 0.9)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0,1), got {alpha}")
    params = _forest_params(cfg_file.get("forest", {}))
    if seed is not None:
        params["seed"] = seed
    dataset = _load_dataset(data or out)
    report = eval_mod.prediction_report(dataset, alpha=alpha, forest_params=params)
    eval_mod.write_prediction_report(report, out)
    _write_resolved_config(
        out, "predict-report", {"conformal": {"alpha": alpha}, "forest": params}
    )
    click.echo((out / "prediction_report.txt").read_text())


@main.command("train-agent")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@_mapped_errors
def train_agent(seed, out, config_path, data):
    """Train the constrained SAC agent; writes agent.stasac and curves.csv."""
    cfg_file = _load_config(config_path)
    train_cfg = _training_config(cfg_file.get("training", {}), seed)
    data_dir = data or out
    ckpt = out / "qrf.ckpt"
    intervals = None
    if ckpt.exists():
        model = load_forest(ckpt)
        factor = load_calibration(ckpt)
        dataset = _load_dataset(data_dir)
        intervals = eval_mod.region_intervals(model, factor, dataset.regions)
    env_cfg = _build_env_cfg(data_dir, _env_section(cfg_file.get("env", {})), intervals)
    agent, curves = agent_mod.train(env_cfg, train_cfg, curves_path=None)
    out.mkdir(parents=True, exist_ok=True)
    agent.save(out / "agent.stasac")
    agent_mod.write_curves(curves, out / "curves.csv")
    _write_resolved_config(
        out,
        "train-agent",
        {
            "training": asdict(train_cfg),
            "env": _env_section(cfg_file.get("env", {})),
            "intervals_from_checkpoint": ckpt.exists(),
        },
    )
    click.echo(
        f"trained {train_cfg.total_episodes} episodes; "
        f"final lambda {agent.lam:.3f} -> {out / 'agent.stasac'}"
    )


def _policy_for(name: str, env_cfg, out: Path, checkpoint: Path | None):
    if name == "gt":
        return baselines.fixed_sequence_policy(
            baselines.request_volume_sequence(env_cfg.regions)
        )
    if name == "gm":
        return baselines.greedy_nearest
    if name == "tsp-st":
        if env_cfg.intervals is None:
            raise DataError("tsp-st needs calibrated intervals; run calibrate first")
        # unbounded intervals (tiny calibration groups) fall back to the
        # region's historical mean as the point estimate
        estimates = {
            rid: pi.midpoint
            if math.isfinite(pi.midpoint)
            else float(sum(env_cfg.repair_samples[rid]) / len(env_cfg.repair_samples[rid]))
            for rid, pi in env_cfg.intervals.items()
        }
        tour = baselines.tsp_service_tour(env_cfg.regions, estimates, depot=env_cfg.depot)
        return baselines.fixed_sequence_policy(tour)
    if name == "stasac":
        path = checkpoint or out / "agent.stasac"
        if not Path(path).exists():
            raise DataError(f"no agent checkpoint at {path}; run train-agent first")
        agent = agent_mod.AttentionSacAgent.load(path, env_cfg)
        return agent.greedy_policy()
    raise ConfigError(f"unknown policy {name!r}")


def _env_with_intervals(out: Path, data_dir: Path, env_section: dict):
    ckpt = out / "qrf.ckpt"
    intervals = None
    if ckpt.exists():
        try:
            factor = load_calibration(ckpt)
        except ValueError:
            factor = None
        if factor is not None:
            model = load_forest(ckpt)
            dataset = _load_dataset(data_dir)
            intervals = eval_mod.region_intervals(model, factor, dataset.regions)
    return _build_env_cfg(data_dir, env_section, intervals)


@main.command("evaluate")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option("--policy", "policy_name", type=click.Choice(["gt", "gm", "tsp-st", "stasac"]), required=True)
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="agent checkpoint")
@click.option("--episodes", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@_mapped_errors
def evaluate_cmd(seed, out, config_path, data, policy_name, checkpoint, episodes, jobs):
    """Run seeded rollouts of one policy and report both metrics."""
    cfg_file = _load_config(config_path)
    eval_section = cfg_file.get("eval", {})
    n_episodes = episodes if episodes is not None else eval_section.get("n_episodes", 20)
    base_seed = seed if seed is not None else eval_section.get("seed", 0)
    env_cfg = _env_with_intervals(out, data or out, _env_section(cfg_file.get("env", {})))
    policy = _policy_for(policy_name, env_cfg, out, checkpoint)
    result = eval_mod.evaluate_policy(env_cfg, policy, n_episodes, seed=base_seed, jobs=jobs)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "policy": policy_name,
        "t_outage": result.t_outage,
        "wd_inequity_mean": result.wd_mean,
        "wd_inequity_pooled": result.wd_pooled,
        "n_episodes": n_episodes,
        "seed": base_seed,
    }
    with open(out / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)
    eval_mod.write_samples(result, out)
    _write_resolved_config(out, "evaluate", {"eval": metrics})
    click.echo(
        f"{policy_name}: T_outage {result.t_outage:.3f} h, "
        f"WD_inequity {result.wd_mean:.3f} (pooled {result.wd_pooled:.3f}) "
        f"over {n_episodes} episodes"
    )


@main.command("compare")
@common_options
@click.option("--data", type=click.Path(path_type=Path), default=None)
@click.option(
    "--policies",
    default="gt,gm,tsp-st,stasac",
    show_default=True,
    help="comma-separated subset of gt,gm,tsp-st,stasac",
)
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--episodes", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@_mapped_errors
def compare_cmd(seed, out, config_path, data, policies, checkpoint, episodes, jobs):
    """Table-style comparison of several policies across evaluation seeds."""
    cfg_file = _load_config(config_path)
    eval_section = cfg_file.get("eval", {})
    n_episodes = episodes if episodes is not None else eval_section.get("n_episodes", 10)
    base_seed = seed if seed is not None else eval_section.get("seed", 0)
    seeds = eval_section.get("seeds", [base_seed + i for i in range(10)])
    names = [p.strip() for p in policies.split(",") if p.strip()]
    if len(names) < 2:
        raise ConfigError("compare needs at least two policies")
    env_cfg = _env_with_intervals(out, data or out, _env_section(cfg_file.get("env", {})))
    table = eval_mod.compare(
        env_cfg,
        {name: _policy_for(name, env_cfg, out, checkpoint) for name in names},
        n_episodes,
        seeds,
        jobs=jobs,
    )
    eval_mod.write_comparison(table, out)
    _write_resolved_config(
        out,
        "compare",
        {"eval": {"policies": names, "n_episodes": n_episodes, "seeds": list(seeds)}},
    )
    click.echo((out / "table.txt").read_text())


if __name__ == "__main__":
    main()
