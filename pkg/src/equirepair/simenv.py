"""Event-driven CMDP environment for a single repair crew.

One episode: the crew starts at the depot at the moment of the hurricane
strike (t=0, every region dark), repeatedly travels to a chosen region and
repairs it. A region's outage duration is its completion time: cumulative
travel so far plus every repair performed so far including its own. Reward
(negative mean outage) and cost (max pairwise group Wasserstein distance)
are paid only on the terminal step.

The hidden per-episode repair durations are sampled from each region's
historical records at reset; the agent only ever sees prediction intervals
through the action candidates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (
    EpisodeOutcome,
    PredictionInterval,
    Region,
    SensitiveGroup,
    validate_region,
)
from .metrics import wd_inequity


class InvalidConfigError(ValueError):
    """Environment configuration violates its invariants."""


class AlreadyRepairedError(ValueError):
    """The chosen region was repaired earlier in the episode."""


class UnknownRegionError(KeyError):
    """The chosen region id is not part of the instance."""


@dataclass(frozen=True)
class TravelModel:
    """Straight-line travel between region coordinates at constant speed."""

    speed_kmh: float = 40.0

    def travel_time(self, a, b) -> float:
        return math.hypot(b[0] - a[0], b[1] - a[1]) / self.speed_kmh


@dataclass(frozen=True)
class EnvConfig:
    regions: tuple[Region, ...]
    repair_samples: dict[int, np.ndarray]  # historical durations per region
    travel: TravelModel = TravelModel()
    prune_max_km: float = math.inf
    d_limit: float = 8.0
    depot: tuple[float, float] = (0.0, 0.0)
    sampler_seed: int = 0
    intervals: dict[int, PredictionInterval] | None = None

    def validate(self) -> "EnvConfig":
        if len(self.regions) == 0:
            raise InvalidConfigError("instance needs at least one region")
        ids = [r.id for r in self.regions]
        if sorted(ids) != list(range(len(ids))):
            raise InvalidConfigError("region ids must be dense integers 0..N-1")
        for r in self.regions:
            validate_region(r)
            samples = self.repair_samples.get(r.id)
            if samples is None or len(samples) == 0:
                raise InvalidConfigError(f"region {r.id} has no historical repair samples")
            if np.any(np.asarray(samples) <= 0):
                raise InvalidConfigError(f"region {r.id} has non-positive repair samples")
        if self.travel.speed_kmh <= 0:
            raise InvalidConfigError("travel speed must be > 0")
        if self.prune_max_km <= 0:
            raise InvalidConfigError("prune_max_km must be > 0")
        return self

    def interval_for(self, region_id: int) -> PredictionInterval:
        if self.intervals is None:
            return PredictionInterval(0.0, 0.0)
        return self.intervals[region_id]


@dataclass(frozen=True)
class EpisodeState:
    """Crew state; immutable, a new state is produced by each step."""

    position: tuple[float, float]
    cum_travel: float
    cum_repair: float
    current_region: int | None
    repaired: tuple[bool, ...]
    completion: tuple[float, ...]  # outage duration per repaired region, else nan
    outage_start: tuple[float, ...]  # hours; all zeros, one mass-outage event

    @property
    def current_time(self) -> float:
        return self.cum_travel + self.cum_repair

    @property
    def n_repaired(self) -> int:
        return sum(self.repaired)


@dataclass(frozen=True)
class ActionCandidate:
    """Per-region action token: interval + spatiotemporal + context parts."""

    region_id: int
    pi: PredictionInterval
    coord: tuple[float, float]
    elapsed: float
    distance_km: float
    group: SensitiveGroup


class RepairEnv:
    """Instance-bound environment; reset picks the episode's hidden durations."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg.validate()
        self.n = len(cfg.regions)
        self._coords = np.array([r.coord for r in cfg.regions])
        self._durations = None

    def reset(self, episode_seed: int) -> EpisodeState:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.cfg.sampler_seed, int(episode_seed)])
        )
        durations = np.empty(self.n)
        for r in sorted(self.cfg.regions, key=lambda r: r.id):
            samples = np.asarray(self.cfg.repair_samples[r.id], dtype=np.float64)
            durations[r.id] = samples[rng.integers(0, samples.size)]
        self._durations = durations
        return EpisodeState(
            position=tuple(self.cfg.depot),
            cum_travel=0.0,
            cum_repair=0.0,
            current_region=None,
            repaired=(False,) * self.n,
            completion=(math.nan,) * self.n,
            outage_start=(0.0,) * self.n,
        )

    def candidate_ids(self, state: EpisodeState) -> tuple[np.ndarray, np.ndarray]:
        """Unrepaired region ids and their distances after the prune mask.

        Regions beyond prune_max_km are masked out; if that would empty the
        action set, the nearest unrepaired region is retained.
        """
        unrepaired = np.nonzero(~np.array(state.repaired))[0]
        if unrepaired.size == 0:
            return unrepaired, np.empty(0)
        deltas = self._coords[unrepaired] - np.asarray(state.position)
        dists = np.hypot(deltas[:, 0], deltas[:, 1])
        keep = dists <= self.cfg.prune_max_km
        if not keep.any():
            keep = np.zeros(unrepaired.size, dtype=bool)
            keep[int(np.argmin(dists))] = True
        return unrepaired[keep], dists[keep]

    def candidates(self, state: EpisodeState) -> list[ActionCandidate]:
        ids, dists = self.candidate_ids(state)
        elapsed = state.current_time
        out = []
        for rid, dist in zip(ids, dists):
            region = self.cfg.regions[rid]
            out.append(
                ActionCandidate(
                    region_id=int(rid),
                    pi=self.cfg.interval_for(int(rid)),
                    coord=(float(region.coord[0]), float(region.coord[1])),
                    elapsed=elapsed,
                    distance_km=float(dist),
                    group=region.group,
                )
            )
        return out

    def step(self, state: EpisodeState, chosen: int):
        """Advance by travel + hidden repair of the chosen region.

        Returns (state', reward, cost, done); reward and cost are zero on
        non-terminal steps and the episode totals on the terminal one.
        """
        if not 0 <= chosen < self.n:
            raise UnknownRegionError(f"region {chosen} is not in the instance")
        if state.repaired[chosen]:
            raise AlreadyRepairedError(f"region {chosen} was already repaired")
        if self._durations is None:
            raise RuntimeError("call reset before step")
        region = self.cfg.regions[chosen]
        target = (float(region.coord[0]), float(region.coord[1]))
        cum_travel = state.cum_travel + self.cfg.travel.travel_time(state.position, target)
        cum_repair = state.cum_repair + float(self._durations[chosen])
        repaired = tuple(
            True if i == chosen else v for i, v in enumerate(state.repaired)
        )
        completion = tuple(
            cum_travel + cum_repair if i == chosen else v
            for i, v in enumerate(state.completion)
        )
        new_state = replace(
            state,
            position=target,
            cum_travel=cum_travel,
            cum_repair=cum_repair,
            current_region=chosen,
            repaired=repaired,
            completion=completion,
        )
        done = all(repaired)
        reward, cost = 0.0, 0.0
        if done:
            outages = {i: completion[i] for i in range(self.n)}
            reward = -float(np.mean(list(outages.values())))
            cost = self._group_cost(outages)
        return new_state, reward, cost, done

    def _group_cost(self, outages: dict[int, float]) -> float:
        samples: dict[SensitiveGroup, list[float]] = {}
        for rid, hours in outages.items():
            samples.setdefault(self.cfg.regions[rid].group, []).append(hours)
        if len(samples) < 2:
            return 0.0
        return wd_inequity(samples)

    def rollout(self, policy, episode_seed: int, log_path=None) -> EpisodeOutcome:
        """Play one full episode with policy(state, candidates) -> region_id."""
        state = self.reset(episode_seed)
        outages: dict[int, float] = {}
        sequence = []
        log_rows = []
        reward = cost = 0.0
        while True:
            cands = self.candidates(state)
            chosen = int(policy(state, cands))
            before = state
            state, reward, cost, done = self.step(state, chosen)
            outages[chosen] = state.current_time
            sequence.append(chosen)
            if log_path is not None:
                log_rows.append(
                    {
                        "step": len(sequence) - 1,
                        "time": state.current_time,
                        "chosen": chosen,
                        "travel": state.cum_travel - before.cum_travel,
                        "repair": state.cum_repair - before.cum_repair,
                    }
                )
            if done:
                break
        if log_path is not None:
            with open(log_path, "w", encoding="utf-8") as f:
                for row in log_rows:
                    f.write(json.dumps(row) + "\n")
        return EpisodeOutcome(
            outage_by_region=outages,
            sequence=tuple(sequence),
            reward=reward,
            cost=cost,
            makespan=state.current_time,
        )


def env_from_dataset(
    dataset,
    travel: TravelModel = TravelModel(),
    prune_max_km: float = math.inf,
    d_limit: float = 8.0,
    depot: tuple[float, float] = (0.0, 0.0),
    sampler_seed: int = 0,
    intervals: dict[int, PredictionInterval] | None = None,
) -> EnvConfig:
    """Build an instance whose empirical repair distributions come from the
    dataset's historical records (all splits)."""
    samples: dict[int, list[float]] = {r.id: [] for r in dataset.regions}
    for rec in dataset.records:
        samples[rec.region_id].append(rec.repair_duration)
    return EnvConfig(
        regions=tuple(sorted(dataset.regions, key=lambda r: r.id)),
        repair_samples={k: np.asarray(v) for k, v in samples.items()},
        travel=travel,
        prune_max_km=prune_max_km,
        d_limit=d_limit,
        depot=depot,
        sampler_seed=sampler_seed,
        intervals=intervals,
    ).validate()


def save_instance(cfg: EnvConfig, path) -> None:
    payload = {
        "regions": [
            {
                "id": r.id,
                "coord": [r.coord[0], r.coord[1]],
                "features": list(r.features),
                "group": int(r.group),
                "request_count": r.request_count,
            }
            for r in cfg.regions
        ],
        "repair_samples": {str(k): list(map(float, v)) for k, v in cfg.repair_samples.items()},
        "speed_kmh": cfg.travel.speed_kmh,
        "prune_max_km": None if math.isinf(cfg.prune_max_km) else cfg.prune_max_km,
        "d_limit": cfg.d_limit,
        "depot": list(cfg.depot),
        "sampler_seed": cfg.sampler_seed,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_instance(path) -> EnvConfig:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    regions = tuple(
        Region(
            r["id"],
            tuple(r["coord"]),
            r["features"],
            SensitiveGroup(r["group"]),
            r["request_count"],
        )
        for r in payload["regions"]
    )
    prune = payload.get("prune_max_km")
    return EnvConfig(
        regions=regions,
        repair_samples={int(k): np.asarray(v) for k, v in payload["repair_samples"].items()},
        travel=TravelModel(payload["speed_kmh"]),
        prune_max_km=math.inf if prune is None else prune,
        d_limit=payload["d_limit"],
        depot=tuple(payload["depot"]),
        sampler_seed=payload.get("sampler_seed", 0),
    ).validate()
