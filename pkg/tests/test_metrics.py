import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equirepair.domain import EpisodeOutcome, PredictionInterval, SensitiveGroup
from equirepair.metrics import (
    EmptyInputError,
    FewerThanTwoGroupsError,
    avg_outage,
    interval_stats,
    wasserstein1,
    wd_inequity,
)

from .oracles import wasserstein_lp

LOW, MID, HIGH = SensitiveGroup.LOW, SensitiveGroup.MIDDLE, SensitiveGroup.HIGH


def test_w1_identity():
    assert wasserstein1([1.0, 2.0, 3.0], [3.0, 1.0, 2.0]) == 0.0


def test_w1_shifted_triple():
    # transport plan moves each of three unit masses by 1/3 of one hour each
    assert wasserstein1([1, 2, 3], [2, 3, 4]) == pytest.approx(1.0, abs=1e-12)
    assert wasserstein_lp([1, 2, 3], [2, 3, 4]) == pytest.approx(1.0, abs=1e-9)


def test_w1_point_masses():
    assert wasserstein1([0.0], [5.0]) == pytest.approx(5.0, abs=1e-12)


def test_w1_unequal_counts_exact():
    a, b = [0.0, 1.0], [0.0, 0.5, 1.0]
    assert wasserstein1(a, b) == pytest.approx(wasserstein_lp(a, b), abs=1e-9)


def test_w1_empty_input():
    with pytest.raises(EmptyInputError):
        wasserstein1([], [1.0])


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=6),
    st.lists(st.floats(-50, 50), min_size=1, max_size=6),
)
def test_w1_matches_transport_lp(a, b):
    assert wasserstein1(a, b) == pytest.approx(wasserstein_lp(a, b), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=6),
    st.lists(st.floats(-50, 50), min_size=1, max_size=6),
    st.floats(-20, 20),
)
def test_w1_translation(a, b, c):
    base = wasserstein1(a, b)
    shifted_both = wasserstein1([v + c for v in a], [v + c for v in b])
    assert shifted_both == pytest.approx(base, abs=1e-9)
    shifted_one = wasserstein1(a, [v + c for v in b])
    assert shifted_one <= base + abs(c) + 1e-9


def test_w1_metric_axioms_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.uniform(0, 30, size=rng.integers(1, 7))
        b = rng.uniform(0, 30, size=rng.integers(1, 7))
        c = rng.uniform(0, 30, size=rng.integers(1, 7))
        ab, ba = wasserstein1(a, b), wasserstein1(b, a)
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-12)
        assert wasserstein1(a, c) <= ab + wasserstein1(b, c) + 1e-9


def test_wd_inequity_identical_groups():
    s = [1.0, 4.0, 9.0]
    assert wd_inequity({LOW: s, MID: list(s), HIGH: list(s)}) == 0.0


def test_wd_inequity_point_masses():
    assert wd_inequity({LOW: [0.0], MID: [3.0], HIGH: [10.0]}) == pytest.approx(10.0)


def test_wd_inequity_needs_two_groups():
    with pytest.raises(FewerThanTwoGroupsError):
        wd_inequity({LOW: [1.0]})


def test_wd_inequity_rejects_empty_group():
    with pytest.raises(EmptyInputError):
        wd_inequity({LOW: [1.0], MID: []})


def test_wd_inequity_label_permutation_invariant():
    rng = np.random.default_rng(3)
    samples = [list(rng.uniform(0, 20, size=5)) for _ in range(3)]
    groups = [LOW, MID, HIGH]
    base = wd_inequity(dict(zip(groups, samples)))
    for perm in ([1, 2, 0], [2, 0, 1], [1, 0, 2]):
        permuted = {groups[i]: samples[j] for i, j in enumerate(perm)}
        assert wd_inequity(permuted) == pytest.approx(base, abs=1e-12)


def _outcome(vals):
    return EpisodeOutcome(
        {i: v for i, v in enumerate(vals)},
        tuple(range(len(vals))),
        -float(np.mean(vals)),
        0.0,
        max(vals),
    )


def test_avg_outage_mean():
    assert avg_outage([_outcome([3.0, 7.0])]) == pytest.approx(5.0)


def test_avg_outage_duplicate_episode():
    o = _outcome([3.0, 7.0])
    assert avg_outage([o, o]) == avg_outage([o])


def test_avg_outage_empty():
    with pytest.raises(EmptyInputError):
        avg_outage([])


def test_interval_stats_uniform():
    pis = [PredictionInterval(2.0, 5.0)] * 4
    stats = interval_stats({LOW: pis, HIGH: pis})
    assert stats == {LOW: pytest.approx(3.0), HIGH: pytest.approx(3.0)}


def test_interval_stats_degenerate():
    stats = interval_stats({MID: [PredictionInterval(4.0, 4.0)]})
    assert stats[MID] == 0.0


def test_interval_stats_empty_group():
    with pytest.raises(EmptyInputError):
        interval_stats({LOW: []})
