import numpy as np
import pytest

from equirepair.datagen import (
    DEFAULT_FRACTIONS,
    Dataset,
    GeneratorConfig,
    GroupTooSmallError,
    InvalidConfigError,
    ParseError,
    SchemaError,
    base_duration_fn,
    generate,
    load_csv,
    records_to_arrays,
    save_csv,
    split,
)
from equirepair.domain import SensitiveGroup

LOW, MID, HIGH = SensitiveGroup.LOW, SensitiveGroup.MIDDLE, SensitiveGroup.HIGH


def small_cfg(**overrides):
    base = dict(
        n_regions=9,
        samples_per_region_by_group={LOW: 6, MID: 8, HIGH: 10},
        seed=11,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.split != b.split or len(a.records) != len(b.records):
        return False
    for ra, rb in zip(a.regions, b.regions):
        if ra.id != rb.id or ra.group != rb.group or ra.request_count != rb.request_count:
            return False
        if not (np.array_equal(ra.coord, rb.coord) and np.array_equal(ra.features, rb.features)):
            return False
    for ra, rb in zip(a.records, b.records):
        if ra.region_id != rb.region_id or ra.group != rb.group:
            return False
        if ra.repair_duration != rb.repair_duration:
            return False
        if not np.array_equal(ra.features, rb.features):
            return False
    return True


def test_generate_deterministic():
    cfg = small_cfg()
    assert datasets_equal(generate(cfg), generate(cfg))


def test_generate_seed_changes_data():
    assert not datasets_equal(generate(small_cfg(seed=1)), generate(small_cfg(seed=2)))


def test_generate_rejects_single_region():
    with pytest.raises(InvalidConfigError):
        generate(small_cfg(n_regions=1))


def test_generate_every_group_present():
    d = generate(small_cfg())
    assert {r.group for r in d.regions} == {LOW, MID, HIGH}


def test_generate_durations_positive():
    d = generate(small_cfg())
    assert all(rec.repair_duration > 0 for rec in d.records)


def test_equal_noise_scales_match_configured_variance():
    cfg = GeneratorConfig(
        n_regions=3,
        samples_per_region_by_group={LOW: 8000, MID: 8000, HIGH: 8000},
        noise_scale_by_group={LOW: 1.0, MID: 1.0, HIGH: 1.0},
        base_duration_range=(6.0, 24.0),
        seed=5,
    )
    d = generate(cfg)
    g = base_duration_fn(cfg)
    X, y, groups, region_ids = records_to_arrays(d.records)
    base = {r.id: g(r.features) for r in d.regions}
    resid = y - np.array([base[i] for i in region_ids])
    for k in (0, 1, 2):
        var = np.var(resid[groups == k])
        assert abs(var - 1.0) <= 0.05


def test_request_rate_ordering():
    cfg = GeneratorConfig(
        n_regions=1200,
        samples_per_region_by_group={LOW: 1, MID: 1, HIGH: 1},
        seed=17,
    )
    d = generate(cfg)
    means = {}
    for g in (LOW, MID, HIGH):
        means[g] = np.mean([r.request_count for r in d.regions if r.group == g])
    assert means[LOW] < means[MID] < means[HIGH]


def test_split_fraction_counts():
    cfg = small_cfg(
        n_regions=4,
        samples_per_region_by_group={LOW: 100, MID: 100, HIGH: 100},
    )
    d = generate(cfg)
    d = split(d, (0.5, 0.25, 0.25), seed=3)
    n = len(d.records)
    counts = {s: d.split.count(s) for s in ("train", "cal", "test")}
    assert abs(counts["train"] - 0.5 * n) <= 3  # +-1 per stratum
    assert abs(counts["cal"] - 0.25 * n) <= 3
    assert abs(counts["test"] - 0.25 * n) <= 3


def test_split_is_stratified():
    d = generate(small_cfg())
    d = split(d, DEFAULT_FRACTIONS, seed=9)
    for g in (LOW, MID, HIGH):
        for s in ("train", "cal", "test"):
            assert any(
                rec.group == g and lbl == s for rec, lbl in zip(d.records, d.split)
            ), f"empty cell ({g.name}, {s})"


def test_split_bad_fractions():
    d = generate(small_cfg())
    with pytest.raises(ValueError):
        split(d, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ValueError):
        split(d, (0.5, 0.5, -0.0), seed=0)


def test_split_group_too_small():
    d = generate(small_cfg())
    # keep only two LOW records
    keep = [i for i, rec in enumerate(d.records) if rec.group != LOW][: len(d.records)]
    low_idx = [i for i, rec in enumerate(d.records) if rec.group == LOW][:2]
    idx = sorted(low_idx + keep)
    trimmed = Dataset(d.regions, [d.records[i] for i in idx], [d.split[i] for i in idx])
    with pytest.raises(GroupTooSmallError):
        split(trimmed, DEFAULT_FRACTIONS, seed=0)


def test_split_deterministic():
    d = generate(small_cfg())
    a = split(d, (0.4, 0.3, 0.3), seed=21)
    b = split(d, (0.4, 0.3, 0.3), seed=21)
    assert a.split == b.split


def test_csv_round_trip(tmp_path):
    d = generate(small_cfg())
    rec_path = tmp_path / "records.csv"
    reg_path = tmp_path / "regions.csv"
    save_csv(d, rec_path, reg_path)
    loaded = load_csv(rec_path, reg_path)
    assert loaded.split == d.split
    for ra, rb in zip(d.records, loaded.records):
        assert rb.repair_duration == pytest.approx(ra.repair_duration, rel=1e-11)
        assert rb.region_id == ra.region_id and rb.group == ra.group
        np.testing.assert_allclose(rb.features, ra.features, rtol=1e-11)
    for ra, rb in zip(d.regions, loaded.regions):
        assert (rb.id, rb.group, rb.request_count) == (ra.id, ra.group, ra.request_count)
        np.testing.assert_allclose(rb.coord, ra.coord, rtol=1e-11)


def test_csv_save_load_save_is_identity(tmp_path):
    d = generate(small_cfg())
    p1, p2 = tmp_path / "a.csv", tmp_path / "ar.csv"
    save_csv(d, p1, p2)
    d2 = load_csv(p1, p2)
    p3, p4 = tmp_path / "b.csv", tmp_path / "br.csv"
    save_csv(d2, p3, p4)
    assert p1.read_bytes() == p3.read_bytes()
    assert p2.read_bytes() == p4.read_bytes()


def test_csv_missing_group_column(tmp_path):
    d = generate(small_cfg())
    rec_path = tmp_path / "records.csv"
    reg_path = tmp_path / "regions.csv"
    save_csv(d, rec_path, reg_path)
    lines = rec_path.read_text().splitlines()
    header = lines[0].split(",")
    drop = header.index("group")
    broken = [",".join(v for i, v in enumerate(ln.split(",")) if i != drop) for ln in lines]
    rec_path.write_text("\n".join(broken) + "\n")
    with pytest.raises(SchemaError):
        load_csv(rec_path, reg_path)


def test_csv_negative_duration_is_parse_error(tmp_path):
    d = generate(small_cfg())
    rec_path = tmp_path / "records.csv"
    reg_path = tmp_path / "regions.csv"
    save_csv(d, rec_path, reg_path)
    lines = rec_path.read_text().splitlines()
    parts = lines[3].split(",")
    parts[-2] = "-1"
    lines[3] = ",".join(parts)
    rec_path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as err:
        load_csv(rec_path, reg_path)
    assert err.value.line == 4
