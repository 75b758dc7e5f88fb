import math

import numpy as np
import pytest

from equirepair.domain import PredictionInterval, Region, SensitiveGroup
from equirepair.metrics import wd_inequity
from equirepair.simenv import (
    ActionCandidate,
    AlreadyRepairedError,
    EnvConfig,
    InvalidConfigError,
    RepairEnv,
    TravelModel,
    UnknownRegionError,
    env_from_dataset,
    load_instance,
    save_instance,
)

from .oracles import replay_outages

LOW, MID, HIGH = SensitiveGroup.LOW, SensitiveGroup.MIDDLE, SensitiveGroup.HIGH


def make_region(rid, coord, group=LOW, request_count=1):
    rng = np.random.default_rng(rid + 100)
    return Region(rid, coord, rng.normal(size=9), group, request_count)


def two_region_cfg():
    # depot -> A is 1 h at 10 km/h, A -> B is 1 h, depot -> B is 2 h
    regions = (
        make_region(0, (10.0, 0.0), LOW),
        make_region(1, (20.0, 0.0), HIGH),
    )
    samples = {0: np.array([2.0]), 1: np.array([3.0])}
    return EnvConfig(regions, samples, travel=TravelModel(10.0), depot=(0.0, 0.0))


def random_cfg(rng, n=6, n_samples=5, prune=math.inf):
    regions = tuple(
        make_region(i, tuple(rng.uniform(0, 20, size=2)), SensitiveGroup(i % 3))
        for i in range(n)
    )
    samples = {i: rng.uniform(0.5, 12.0, size=n_samples) for i in range(n)}
    return EnvConfig(
        regions,
        samples,
        travel=TravelModel(float(rng.uniform(20, 60))),
        prune_max_km=prune,
        depot=tuple(rng.uniform(0, 20, size=2)),
    )


def sequence_policy(order):
    it = iter(order)

    def policy(state, candidates):
        want = next(it)
        assert any(c.region_id == want for c in candidates)
        return want

    return policy


def random_policy(seed):
    rng = np.random.default_rng(seed)

    def policy(state, candidates):
        return candidates[rng.integers(0, len(candidates))].region_id

    return policy


def test_reset_deterministic():
    rng = np.random.default_rng(0)
    cfg = random_cfg(rng)
    env = RepairEnv(cfg)
    env.reset(7)
    d1 = env._durations.copy()
    env.reset(7)
    assert np.array_equal(env._durations, d1)
    env.reset(8)
    assert not np.array_equal(env._durations, d1)


def test_reset_single_sample_region():
    cfg = two_region_cfg()
    env = RepairEnv(cfg)
    env.reset(3)
    assert env._durations[0] == 2.0 and env._durations[1] == 3.0


def test_config_requires_samples():
    regions = (make_region(0, (1.0, 0.0)), make_region(1, (2.0, 0.0)))
    with pytest.raises(InvalidConfigError):
        EnvConfig(regions, {0: np.array([1.0]), 1: np.array([])}).validate()


def test_config_requires_dense_ids():
    regions = (make_region(0, (1.0, 0.0)), make_region(2, (2.0, 0.0)))
    with pytest.raises(InvalidConfigError):
        EnvConfig(regions, {0: np.array([1.0]), 2: np.array([1.0])}).validate()


def test_two_region_hand_accounting():
    env = RepairEnv(two_region_cfg())
    out = env.rollout(sequence_policy([0, 1]), episode_seed=0)
    assert out.outage_by_region == {0: pytest.approx(3.0), 1: pytest.approx(7.0)}
    assert out.reward == pytest.approx(-5.0)
    assert out.makespan == pytest.approx(7.0)

    # reverse order: depot->B 2h + repair 3h = 5; B->A 1h + repair 2h = 8
    out = env.rollout(sequence_policy([1, 0]), episode_seed=0)
    expected, _ = replay_outages(
        (0.0, 0.0), {0: (10.0, 0.0), 1: (20.0, 0.0)}, 10.0, {0: 2.0, 1: 3.0}, [1, 0]
    )
    assert out.outage_by_region == expected
    assert expected == {1: pytest.approx(5.0), 0: pytest.approx(8.0)}


def test_step_errors():
    env = RepairEnv(two_region_cfg())
    state = env.reset(0)
    state, *_ = env.step(state, 0)
    with pytest.raises(AlreadyRepairedError):
        env.step(state, 0)
    with pytest.raises(UnknownRegionError):
        env.step(state, 5)


def test_candidates_all_unrepaired_without_pruning():
    rng = np.random.default_rng(1)
    env = RepairEnv(random_cfg(rng, n=5))
    state = env.reset(0)
    assert {c.region_id for c in env.candidates(state)} == set(range(5))
    state, *_ = env.step(state, 2)
    assert {c.region_id for c in env.candidates(state)} == {0, 1, 3, 4}


def test_candidates_prune_fallback_keeps_nearest():
    regions = (
        make_region(0, (5.0, 0.0)),
        make_region(1, (9.0, 0.0)),
    )
    samples = {0: np.array([1.0]), 1: np.array([1.0])}
    cfg = EnvConfig(regions, samples, prune_max_km=0.5, depot=(0.0, 0.0))
    env = RepairEnv(cfg)
    state = env.reset(0)
    cands = env.candidates(state)
    assert [c.region_id for c in cands] == [0]  # nearest retained


def test_candidates_hide_episode_durations():
    env = RepairEnv(two_region_cfg())
    state = env.reset(0)
    for c in env.candidates(state):
        assert isinstance(c, ActionCandidate)
        assert c.pi == PredictionInterval(0.0, 0.0)  # no interval table attached
        assert not hasattr(c, "duration")


def test_single_region_episode():
    regions = (make_region(0, (10.0, 0.0)),)
    cfg = EnvConfig(regions, {0: np.array([4.0])}, travel=TravelModel(10.0))
    out = RepairEnv(cfg).rollout(sequence_policy([0]), episode_seed=0)
    assert out.outage_by_region[0] == pytest.approx(5.0)
    assert out.cost == 0.0  # single group: no pairwise distance


def test_rollout_sequence_is_permutation():
    rng = np.random.default_rng(2)
    env = RepairEnv(random_cfg(rng, n=7))
    for seed in range(5):
        out = env.rollout(random_policy(seed), episode_seed=seed)
        assert sorted(out.sequence) == list(range(7))


def test_accounting_matches_hand_replay_exactly():
    rng = np.random.default_rng(3)
    for trial in range(40):
        n = int(rng.integers(2, 8))
        cfg = random_cfg(rng, n=n)
        env = RepairEnv(cfg)
        out = env.rollout(random_policy(trial), episode_seed=trial)
        coords = {r.id: tuple(r.coord) for r in cfg.regions}
        repairs = {i: float(env._durations[i]) for i in range(n)}
        expected, makespan = replay_outages(
            cfg.depot, coords, cfg.travel.speed_kmh, repairs, out.sequence
        )
        assert out.outage_by_region == expected  # bit-exact
        assert out.makespan == makespan
        assert max(out.outage_by_region.values()) == out.makespan


def test_terminal_reward_cost_match_metrics():
    rng = np.random.default_rng(4)
    for trial in range(10):
        cfg = random_cfg(rng, n=6)
        env = RepairEnv(cfg)
        out = env.rollout(random_policy(trial), episode_seed=trial)
        vals = list(out.outage_by_region.values())
        assert out.reward == pytest.approx(-np.mean(vals), abs=1e-9)
        per_group = {}
        for rid, hours in out.outage_by_region.items():
            per_group.setdefault(cfg.regions[rid].group, []).append(hours)
        assert out.cost == pytest.approx(wd_inequity(per_group), abs=1e-9)


def test_adjacent_swap_effect_localized():
    rng = np.random.default_rng(5)
    cfg = random_cfg(rng, n=6)
    env = RepairEnv(cfg)
    base = env.rollout(sequence_policy([0, 1, 2, 3, 4, 5]), episode_seed=9)
    swapped = env.rollout(sequence_policy([0, 1, 3, 2, 4, 5]), episode_seed=9)
    # regions before the swapped pair keep their outage durations
    for rid in (0, 1):
        assert swapped.outage_by_region[rid] == base.outage_by_region[rid]
    # later regions shift by the same travel-time delta
    deltas = [
        swapped.outage_by_region[rid] - base.outage_by_region[rid] for rid in (4, 5)
    ]
    assert deltas[0] == pytest.approx(deltas[1], abs=1e-12)


def test_episode_log(tmp_path):
    env = RepairEnv(two_region_cfg())
    log = tmp_path / "episode.jsonl"
    env.rollout(sequence_policy([0, 1]), episode_seed=0, log_path=log)
    import json

    rows = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["chosen"] for r in rows] == [0, 1]
    assert rows[0]["travel"] == pytest.approx(1.0)
    assert rows[1]["repair"] == pytest.approx(3.0)


def test_instance_json_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    cfg = random_cfg(rng, n=4, prune=7.5)
    path = tmp_path / "instance.json"
    save_instance(cfg, path)
    loaded = load_instance(path)
    assert [r.id for r in loaded.regions] == [r.id for r in cfg.regions]
    assert loaded.travel == cfg.travel
    assert loaded.prune_max_km == cfg.prune_max_km
    assert loaded.depot == cfg.depot
    for i in range(4):
        np.testing.assert_allclose(loaded.repair_samples[i], cfg.repair_samples[i])
    env = RepairEnv(loaded)
    out1 = env.rollout(random_policy(0), episode_seed=1)
    out2 = RepairEnv(cfg).rollout(random_policy(0), episode_seed=1)
    assert out1.sequence == out2.sequence
    assert out1.makespan == pytest.approx(out2.makespan)


def test_env_from_dataset():
    from equirepair.datagen import GeneratorConfig, generate

    cfg = GeneratorConfig(
        n_regions=6,
        samples_per_region_by_group={LOW: 4, MID: 4, HIGH: 4},
        seed=19,
    )
    d = generate(cfg)
    env_cfg = env_from_dataset(d, d_limit=8.0)
    assert len(env_cfg.regions) == 6
    assert all(len(env_cfg.repair_samples[r.id]) == 4 for r in env_cfg.regions)
    intervals = {r.id: PredictionInterval(1.0, 2.0) for r in d.regions}
    env_cfg2 = env_from_dataset(d, intervals=intervals)
    env = RepairEnv(env_cfg2)
    state = env.reset(0)
    assert env.candidates(state)[0].pi == PredictionInterval(1.0, 2.0)
