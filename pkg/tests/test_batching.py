from dataclasses import replace

import numpy as np
import pytest

from geofeat.batching import (BatchConfig, MatchSet, MatchSetStream, PatchBank, RandomPairStream, build_batch,
                              epoch_slot, extract_match_sets, select_sets)
from geofeat.errors import StreamExhausted, ValidationError
from geofeat.geosim import all_pair_reports
from geofeat.patches import NO_AUGMENT
from geofeat.synth import generate_synthetic_scene

from conftest import SMALL


@pytest.fixture(scope="module")
def scene128():
    return generate_synthetic_scene(replace(SMALL, n_tracks=128), 5)[0]


@pytest.fixture(scope="module")
def bank128(scene128):
    return PatchBank(scene128)


def test_two_disjoint_sets_from_128_tracks(scene128, bank128):
    sets = extract_match_sets(scene128, (0, 1), BatchConfig(64, 1, 0), bank=bank128)
    assert len(sets) == 2
    a, b = (set(ms.track_ids.tolist()) for ms in sets)
    assert len(a) == len(b) == 64 and not a & b
    assert all(ms.image_pair == (0, 1) for ms in sets)


def test_too_few_tracks_gives_nothing(scene128, bank128):
    subset = set(range(63))
    assert extract_match_sets(scene128, (0, 1), BatchConfig(64, 1, 0), bank=bank128, track_subset=subset) == []


def test_chunking_is_seeded(scene128, bank128):
    cfg = BatchConfig(32, 1, 9)
    x = extract_match_sets(scene128, (1, 2), cfg, bank=bank128)
    y = extract_match_sets(scene128, (1, 2), cfg, bank=bank128)
    assert [m.track_ids.tolist() for m in x] == [m.track_ids.tolist() for m in y]
    z = extract_match_sets(scene128, (1, 2), cfg, epoch=1, bank=bank128)
    assert [m.track_ids.tolist() for m in x] != [m.track_ids.tolist() for m in z]


def test_patches_match_bank(scene128, bank128):
    ms = extract_match_sets(scene128, (0, 3), BatchConfig(16, 1, 0), bank=bank128)[0]
    ids = ms.track_ids.tolist()
    assert np.array_equal(ms.patches_a, bank128.get(0, ids))
    assert np.array_equal(ms.patches_b, bank128.get(3, ids))
    assert np.all((ms.s_patch > 0) & (ms.s_patch <= 1))


def _toy_sets(n, n1=4):
    rng = np.random.default_rng(0)
    return [MatchSet((0, 1), rng.uniform(0, 255, (n1, 32, 32)), rng.uniform(0, 255, (n1, 32, 32)),
                     np.full(n1, 0.5), np.arange(n1) + 100 * k) for k in range(n)]


def test_batch_size_arithmetic(scene128, bank128):
    stream = MatchSetStream(scene128, all_pair_reports(scene128), BatchConfig(8, 12, 0), bank128)
    batch = build_batch(stream, BatchConfig(8, 12, 0), 0)
    assert len(batch.match_sets) == 12 and batch.n_pairs == 96
    tiles = _toy_sets(12, 64)
    assert build_batch(tiles, BatchConfig(64, 12, 0), 0).n_pairs == 768


def test_exact_stream_is_used_once():
    sets = _toy_sets(12)
    batch = build_batch(sets, BatchConfig(4, 12, 0), 0, augment=None)
    assert sorted(int(m.track_ids[0]) for m in batch.match_sets) == [100 * k for k in range(12)]


def test_steps_select_differently_and_cover_epoch():
    sets = _toy_sets(12)
    cfg = BatchConfig(4, 3, 1)
    picks = [[int(m.track_ids[0]) for m in select_sets(sets, cfg, s)] for s in range(4)]
    assert picks[0] != picks[1]
    flat = sum(picks, [])
    assert sorted(flat) == [100 * k for k in range(12)]
    assert epoch_slot(12, 3, 5) == (1, 1)


def test_batch_deterministic_and_standardized():
    sets = _toy_sets(6)
    cfg = BatchConfig(4, 2, 3)
    a = build_batch(sets, cfg, 2)
    b = build_batch(sets, cfg, 2)
    for x, y in zip(a.match_sets, b.match_sets):
        assert np.array_equal(x.patches_a, y.patches_a) and np.array_equal(x.patches_b, y.patches_b)
    for ms in a.match_sets:
        for p in np.concatenate([ms.patches_a, ms.patches_b]):
            assert abs(p.mean()) <= 1e-6 and abs(p.std() - 1) <= 1e-6


def test_stream_exhausted():
    with pytest.raises(StreamExhausted):
        build_batch(_toy_sets(2), BatchConfig(4, 3, 0), 0)


def test_match_set_invariants():
    with pytest.raises(ValidationError):
        MatchSet((0, 1), np.zeros((2, 32, 32)), np.zeros((2, 32, 32)), np.array([0.5, 0.5]), np.array([3, 3]))
    with pytest.raises(ValidationError):
        MatchSet((0, 1), np.zeros((2, 32, 32)), np.zeros((2, 32, 32)), np.array([0.0, 0.5]), np.array([1, 2]))
    with pytest.raises(ValidationError):
        BatchConfig(n1=1)


def test_match_set_stream_keeps_pairs_apart(scene128, bank128):
    reps = all_pair_reports(scene128)
    stream = MatchSetStream(scene128, reps, BatchConfig(32, 2, 0), bank128)
    ep = stream.epoch(0)
    assert len(ep) == stream.n_sets() == 4 * len(reps)
    for (pair, chunk), ms in zip(stream.chunks(0), ep):
        assert ms.image_pair == pair and np.array_equal(ms.track_ids, chunk)


def test_random_stream_mixes_pairs(scene128, bank128):
    reps = all_pair_reports(scene128)
    stream = RandomPairStream(scene128, reps, BatchConfig(32, 2, 0), bank128)
    ms = stream.epoch(0)[0]
    assert len(set(ms.pair_ids.tolist())) > 1
    assert build_batch(stream, BatchConfig(32, 2, 0), 0, augment=NO_AUGMENT).n_pairs == 64
