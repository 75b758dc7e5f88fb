"""Seeded synthetic generator for heteroscedastic repair data, plus CSV IO.

Stands in for the historical utility datasets: repair durations follow
y = g(x) + eps with a group-dependent noise scale, request volumes follow
group-dependent Poisson rates (low-income regions submit fewer requests
and contribute fewer samples), so the generated corpus shows the same
qualitative heteroscedasticity and imbalance the real data does.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (
    N_FEATURES,
    Region,
    RepairRecord,
    SensitiveGroup,
    validate_region,
)

SPLITS = ("train", "cal", "test")
DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)


class InvalidConfigError(ValueError):
    """Generator configuration violates its invariants."""


class GroupTooSmallError(ValueError):
    """A sensitive group has too few records to stratify."""


class ParseError(ValueError):
    """A CSV row could not be parsed; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(ValueError):
    """CSV header is missing required columns."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_regions: int = 55
    samples_per_region_by_group: dict[SensitiveGroup, int] = field(
        default_factory=lambda: {
            SensitiveGroup.LOW: 8,
            SensitiveGroup.MIDDLE: 20,
            SensitiveGroup.HIGH: 40,
        }
    )
    noise_scale_by_group: dict[SensitiveGroup, float] = field(
        default_factory=lambda: {
            SensitiveGroup.LOW: 6.0,
            SensitiveGroup.MIDDLE: 3.0,
            SensitiveGroup.HIGH: 1.5,
        }
    )
    base_duration_range: tuple[float, float] = (4.0, 24.0)
    request_rate_by_group: dict[SensitiveGroup, float] = field(
        default_factory=lambda: {
            SensitiveGroup.LOW: 4.0,
            SensitiveGroup.MIDDLE: 10.0,
            SensitiveGroup.HIGH: 22.0,
        }
    )
    city_extent_km: float = 30.0
    seed: int = 0

    def groups(self) -> list[SensitiveGroup]:
        return sorted(self.samples_per_region_by_group)

    def validate(self) -> "GeneratorConfig":
        groups = self.groups()
        if not groups:
            raise InvalidConfigError("samples_per_region_by_group must not be empty")
        if self.n_regions < max(2, len(groups)):
            raise InvalidConfigError(
                f"n_regions must be >= {max(2, len(groups))} so every group gets a region"
            )
        for g in groups:
            if self.samples_per_region_by_group[g] < 1:
                raise InvalidConfigError(f"samples per region must be >= 1 for {g.name}")
            if self.noise_scale_by_group.get(g, 0.0) <= 0:
                raise InvalidConfigError(f"noise scale must be > 0 for {g.name}")
            if self.request_rate_by_group.get(g, 0.0) <= 0:
                raise InvalidConfigError(f"request rate must be > 0 for {g.name}")
        lo, hi = self.base_duration_range
        if not (0 < lo < hi):
            raise InvalidConfigError("base_duration_range must satisfy 0 < lo < hi")
        if self.city_extent_km <= 0:
            raise InvalidConfigError("city_extent_km must be > 0")
        if self.seed < 0:
            raise InvalidConfigError("seed must be a non-negative integer")
        return self


@dataclass(frozen=True, eq=False)
class Dataset:
    """Regions plus repair records with train/cal/test labels."""

    regions: list[Region]
    records: list[RepairRecord]
    split: list[str]

    def __post_init__(self):
        ids = {r.id for r in self.regions}
        for rec in self.records:
            if rec.region_id not in ids:
                raise InvalidConfigError(f"record references unknown region {rec.region_id}")
        for s in self.split:
            if s not in SPLITS:
                raise InvalidConfigError(f"unknown split label {s!r}")
        if len(self.split) != len(self.records):
            raise InvalidConfigError("split labels must align with records")

    def subset(self, split_name: str) -> list[RepairRecord]:
        return [rec for rec, s in zip(self.records, self.split) if s == split_name]


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def base_duration_fn(cfg: GeneratorConfig):
    """Seed-derived smooth map from a 9-feature vector to hours in the base range."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    w = rng.normal(size=N_FEATURES) / 3.0
    b = rng.normal() * 0.3
    lo, hi = cfg.base_duration_range

    def g(x: np.ndarray) -> float:
        return float(lo + (hi - lo) * _sigmoid(np.asarray(x) @ w + b))

    return g


def generate(cfg: GeneratorConfig) -> Dataset:
    """Draw a full synthetic dataset; byte-identical for a fixed config."""
    cfg.validate()
    groups = cfg.groups()
    g_fn = base_duration_fn(cfg)

    region_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 202]))
    regions = []
    for i in range(cfg.n_regions):
        group = groups[i % len(groups)]
        coord = region_rng.uniform(0.0, cfg.city_extent_km, size=2)
        feats = np.empty(N_FEATURES)
        feats[:2] = coord / cfg.city_extent_km
        feats[2:] = region_rng.normal(size=N_FEATURES - 2)
        count = int(region_rng.poisson(cfg.request_rate_by_group[group]))
        regions.append(validate_region(Region(i, coord, feats, group, count)))

    records = []
    for region in regions:
        rec_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303, region.id]))
        scale = cfg.noise_scale_by_group[region.group]
        base = g_fn(region.features)
        n = cfg.samples_per_region_by_group[region.group]
        for _ in range(n):
            # resample (not clip) so the lower tail keeps its shape
            y = base + rec_rng.normal(scale=scale)
            while y <= 0:
                y = base + rec_rng.normal(scale=scale)
            records.append(RepairRecord(region.id, region.features, region.group, y))

    unlabeled = Dataset(regions, records, ["train"] * len(records))
    return split(unlabeled, DEFAULT_FRACTIONS, seed=cfg.seed)


def split(d: Dataset, fractions, seed: int) -> Dataset:
    """Relabel records into train/cal/test, stratified by sensitive group.

    Uses largest-remainder rounding per group and guarantees every
    (group, split) cell is nonempty; deterministic for a fixed seed.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    by_group: dict[SensitiveGroup, list[int]] = {}
    for i, rec in enumerate(d.records):
        by_group.setdefault(rec.group, []).append(i)

    labels = [""] * len(d.records)
    for g in sorted(by_group):
        idx = np.array(by_group[g])
        if idx.size < 3:
            raise GroupTooSmallError(
                f"group {g.name} has {idx.size} records; need >= 3 to stratify"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, 404, int(g)]))
        idx = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(idx.size, fractions)
        start = 0
        for name, c in zip(SPLITS, counts):
            for i in idx[start : start + c]:
                labels[i] = name
            start += c
    return Dataset(d.regions, d.records, labels)


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = np.argsort([-(r - c) for r, c in zip(raw, counts)], kind="stable")
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    # every split must keep at least one record per group
    for j in range(len(counts)):
        while counts[j] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[j] += 1
    return counts


def records_to_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (X, y, groups, region_ids) arrays."""
    X = np.array([r.features for r in records], dtype=np.float64).reshape(len(records), -1)
    y = np.array([r.repair_duration for r in records], dtype=np.float64)
    groups = np.array([int(r.group) for r in records], dtype=np.int64)
    region_ids = np.array([r.region_id for r in records], dtype=np.int64)
    return X, y, groups, region_ids


_FLOAT = "%.12g"
_RECORD_COLS = ["region_id"] + [f"x{i}" for i in range(1, 10)] + [
    "group",
    "repair_duration",
    "split",
]
_REGION_COLS = ["region_id", "coord_x_km", "coord_y_km", "group", "request_count"] + [
    f"x{i}" for i in range(1, 10)
]


def save_csv(d: Dataset, records_path, regions_path) -> None:
    """Write the record and region tables in the documented CSV schema."""
    with open(records_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_RECORD_COLS)
        for rec, s in zip(d.records, d.split):
            w.writerow(
                [rec.region_id]
                + [_FLOAT % v for v in rec.features]
                + [int(rec.group), _FLOAT % rec.repair_duration, s]
            )
    with open(regions_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(_REGION_COLS)
        for r in d.regions:
            w.writerow(
                [r.id, _FLOAT % r.coord[0], _FLOAT % r.coord[1], int(r.group), r.request_count]
                + [_FLOAT % v for v in r.features]
            )


def load_csv(records_path, regions_path) -> Dataset:
    """Load both CSV tables back into a Dataset; inverse of save_csv."""
    regions = []
    with open(regions_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        _check_columns(reader.fieldnames, _REGION_COLS, regions_path)
        for lineno, row in enumerate(reader, start=2):
            try:
                coord = (float(row["coord_x_km"]), float(row["coord_y_km"]))
                feats = [float(row[f"x{i}"]) for i in range(1, 10)]
                region = Region(
                    int(row["region_id"]),
                    coord,
                    feats,
                    SensitiveGroup(int(row["group"])),
                    int(row["request_count"]),
                )
                regions.append(validate_region(region))
            except ParseError:
                raise
            except (TypeError, ValueError) as e:
                raise ParseError(lineno, str(e)) from e

    records, labels = [], []
    with open(records_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        _check_columns(reader.fieldnames, _RECORD_COLS, records_path)
        for lineno, row in enumerate(reader, start=2):
            try:
                feats = [float(row[f"x{i}"]) for i in range(1, 10)]
                rec = RepairRecord(
                    int(row["region_id"]),
                    feats,
                    SensitiveGroup(int(row["group"])),
                    float(row["repair_duration"]),
                )
                if row["split"] not in SPLITS:
                    raise ValueError(f"unknown split label {row['split']!r}")
                records.append(rec)
                labels.append(row["split"])
            except (TypeError, ValueError) as e:
                raise ParseError(lineno, str(e)) from e
    return Dataset(regions, records, labels)


def _check_columns(fieldnames, expected, path):
    missing = [c for c in expected if c not in (fieldnames or [])]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")


def with_seed(cfg: GeneratorConfig, seed: int) -> GeneratorConfig:
    return replace(cfg, seed=seed)
