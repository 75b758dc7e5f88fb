"""Efficiency and equity metrics over outage-duration samples."""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from itertools import combinations

import numpy as np

from .domain import EpisodeOutcome, PredictionInterval, SensitiveGroup

# Per-group outage samples; every listed group must be nonempty.
GroupedSamples = Mapping[SensitiveGroup, Sequence[float]]


class EmptyInputError(ValueError):
    """A metric received an empty sample set."""


class FewerThanTwoGroupsError(ValueError):
    """Pairwise group comparison needs at least two groups."""


def wasserstein1(a, b) -> float:
    """Exact 1-Wasserstein distance between two empirical distributions.

    Merges the pooled sample values as integration breakpoints and sums
    |F_a - F_b| over the gaps, which equals the integral of the quantile
    difference over (0,1). Exact for unequal sample counts; symmetric;
    zero iff the multisets coincide.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise EmptyInputError("wasserstein1 needs nonempty samples on both sides")
    pooled = np.sort(np.concatenate([a, b]))
    gaps = np.diff(pooled)
    cdf_a = np.searchsorted(a, pooled[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, pooled[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * gaps))


def wd_inequity(samples: GroupedSamples) -> float:
    """Maximum pairwise 1-Wasserstein distance between per-group samples."""
    groups = sorted(samples)
    if len(groups) < 2:
        raise FewerThanTwoGroupsError(
            f"need at least two groups, got {len(groups)}"
        )
    for g in groups:
        if len(samples[g]) == 0:
            raise EmptyInputError(f"group {SensitiveGroup(g).name} has no samples")
    return max(wasserstein1(samples[g1], samples[g2]) for g1, g2 in combinations(groups, 2))


def avg_outage(outcomes: Iterable[EpisodeOutcome]) -> float:
    """Mean outage duration over all (episode, region) pairs, in hours."""
    values = [v for o in outcomes for v in o.outage_by_region.values()]
    if not values:
        raise EmptyInputError("avg_outage needs at least one episode outcome")
    return float(np.mean(values))


def interval_stats(
    intervals_by_group: Mapping[SensitiveGroup, Sequence[PredictionInterval]],
) -> dict[SensitiveGroup, float]:
    """Mean interval length (hi - lo) per group."""
    if not intervals_by_group:
        raise EmptyInputError("interval_stats needs at least one group")
    out = {}
    for g in sorted(intervals_by_group):
        pis = intervals_by_group[g]
        if len(pis) == 0:
            raise EmptyInputError(f"group {SensitiveGroup(g).name} has no intervals")
        out[SensitiveGroup(g)] = float(np.mean([pi.length for pi in pis]))
    return out
