"""Core data types shared across the restoration pipeline.

Everything here is a plain value object: immutable after construction and
safe to share between threads. Durations are real-valued hours throughout;
region ids are dense integers 0..N-1.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

N_FEATURES = 9


class SensitiveGroup(IntEnum):
    """Income tier used for equity accounting."""

    LOW = 0
    MIDDLE = 1
    HIGH = 2


class FeatureDimensionError(ValueError):
    """Region/record feature vector does not have exactly 9 entries."""


class NegativeRequestCountError(ValueError):
    """Region carries a negative historical request count."""


class OutcomeInvariantError(ValueError):
    """EpisodeOutcome fields are mutually inconsistent."""


def _frozen_array(values, n=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if n is not None and arr.size != n:
        raise FeatureDimensionError(f"expected {n} entries, got {arr.size}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Region:
    """A repairable service area.

    coord is a 2-D position in kilometers, features a 9-vector of real
    covariates, request_count the historical number of repair requests.
    """

    id: int
    coord: np.ndarray
    features: np.ndarray
    group: SensitiveGroup
    request_count: int

    def __post_init__(self):
        object.__setattr__(self, "coord", _frozen_array(self.coord, 2))
        arr = np.array(self.features, dtype=np.float64).reshape(-1)
        arr.flags.writeable = False
        object.__setattr__(self, "features", arr)
        object.__setattr__(self, "group", SensitiveGroup(self.group))


def validate_region(r: Region) -> Region:
    """Check Region invariants; returns the region or raises."""
    if r.features.size != N_FEATURES:
        raise FeatureDimensionError(
            f"region {r.id}: features must have {N_FEATURES} entries, got {r.features.size}"
        )
    if r.request_count < 0:
        raise NegativeRequestCountError(
            f"region {r.id}: request_count must be >= 0, got {r.request_count}"
        )
    return r


@dataclass(frozen=True, eq=False)
class RepairRecord:
    """One historical (features, group, repair-duration) observation."""

    region_id: int
    features: np.ndarray
    group: SensitiveGroup
    repair_duration: float

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_array(self.features, N_FEATURES))
        object.__setattr__(self, "group", SensitiveGroup(self.group))
        object.__setattr__(self, "repair_duration", float(self.repair_duration))
        if not self.repair_duration > 0:
            raise ValueError(f"repair_duration must be > 0, got {self.repair_duration}")


@dataclass(frozen=True)
class PredictionInterval:
    """Lower/upper repair-duration bounds in hours."""

    lo: float
    hi: float

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        if np.isnan(self.lo) or np.isnan(self.hi):
            raise ValueError("interval bounds must not be NaN")
        if self.lo > self.hi:
            raise ValueError(f"interval must satisfy lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, y: float) -> bool:
        """Closed-interval membership."""
        return self.lo <= y <= self.hi


@dataclass(frozen=True, eq=False)
class EpisodeOutcome:
    """Per-region outage durations and terminal reward/cost of one rollout.

    Construction enforces the accounting identities: reward is the negative
    mean outage duration and sequence visits every region exactly once.
    """

    outage_by_region: dict[int, float]
    sequence: tuple[int, ...]
    reward: float
    cost: float
    makespan: float

    def __post_init__(self):
        object.__setattr__(self, "sequence", tuple(int(i) for i in self.sequence))
        object.__setattr__(
            self,
            "outage_by_region",
            {int(k): float(v) for k, v in self.outage_by_region.items()},
        )
        if sorted(self.sequence) != sorted(self.outage_by_region):
            raise OutcomeInvariantError("sequence must visit every region exactly once")
        mean_outage = float(np.mean(list(self.outage_by_region.values())))
        scale = max(1.0, abs(mean_outage))
        if abs(self.reward + mean_outage) > 1e-9 * scale:
            raise OutcomeInvariantError(
                f"reward {self.reward} != -mean(outage) {-mean_outage}"
            )
        if self.cost < 0:
            raise OutcomeInvariantError(f"cost must be >= 0, got {self.cost}")
