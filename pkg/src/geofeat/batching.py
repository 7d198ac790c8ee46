"""Match-set extraction per image pair and deterministic training-batch assembly."""

from __future__ import annotations

from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import StreamExhausted, ValidationError
from .geosim import GeoSimParams, SimilarityReport, image_similarity
from .patches import GRID_SIZE, SUPPORT_K, AugmentParams, augment_pair, crop_patches, standardize
from .scene import SceneReconstruction

_SET_SHUFFLE = 0x5E7
_EPOCH_SHUFFLE = 0xE90C
_AUGMENT = 0xA09
_RANDOM_POOL = 0x2A4D


@dataclass(frozen=True)
class BatchConfig:
    n1: int = 64
    n2: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n1 < 2:
            raise ValidationError("n1 must be at least 2")
        if self.n2 < 1:
            raise ValidationError("n2 must be at least 1")


@dataclass(frozen=True)
class MatchSet:
    image_pair: Tuple[int, int]
    patches_a: np.ndarray  # (n1, G, G)
    patches_b: np.ndarray
    s_patch: np.ndarray  # (n1,)
    track_ids: np.ndarray  # (n1,)
    pair_ids: Optional[np.ndarray] = None  # per entry image pair when entries are not from one pair

    def __post_init__(self):
        n = len(self.track_ids)
        if self.patches_a.shape[0] != n or self.patches_b.shape[0] != n or len(self.s_patch) != n:
            raise ValidationError("match set arrays disagree in length")
        if self.pair_ids is None and len(set(np.asarray(self.track_ids).tolist())) != n:
            raise ValidationError("match set track ids must be distinct")
        sp = np.asarray(self.s_patch)
        if np.any(sp <= 0) or np.any(sp > 1):
            raise ValidationError("s_patch must lie in (0, 1]")

    @property
    def n1(self) -> int:
        return len(self.track_ids)


@dataclass(frozen=True)
class TrainingBatch:
    match_sets: Tuple[MatchSet, ...]
    step: int = 0

    @property
    def n_pairs(self) -> int:
        return sum(ms.n1 for ms in self.match_sets)


class PatchBank:
    """Raw (un-standardised) patches of every observation, cropped once per image."""

    def __init__(self, scene: SceneReconstruction, g_size: int = GRID_SIZE, k: float = SUPPORT_K,
                 cameras: Optional[Sequence[int]] = None):
        self.g_size = g_size
        self._index: Dict[int, Dict[int, int]] = {}
        self._patches: Dict[int, np.ndarray] = {}
        cams = [c.id for c in scene.cameras] if cameras is None else list(cameras)
        for cid in cams:
            obs = scene.observations_in(cid)
            kps = np.array([kp.as_array() for _, kp in obs]).reshape(-1, 4)
            self._patches[cid] = crop_patches(scene.images[cid], kps, g_size, k)
            self._index[cid] = {tid: n for n, (tid, _) in enumerate(obs)}

    def get(self, camera_id: int, track_ids: Sequence[int]) -> np.ndarray:
        idx = self._index[camera_id]
        return self._patches[camera_id][[idx[t] for t in track_ids]]


def _shuffled_chunks(track_ids: np.ndarray, n1: int, key) -> List[np.ndarray]:
    order = np.random.default_rng(key).permutation(len(track_ids))
    n_sets = len(track_ids) // n1
    return [track_ids[order[c * n1:(c + 1) * n1]] for c in range(n_sets)]


def _pair_tracks(report: SimilarityReport, track_subset: Optional[set]):
    tids = np.asarray(report.track_ids, dtype=np.int64)
    sp = np.asarray(report.s_patch)
    if track_subset is not None:
        keep = np.array([t in track_subset for t in tids.tolist()], dtype=bool)
        tids, sp = tids[keep], sp[keep]
    return tids, sp


def _chunk_ids(report: SimilarityReport, config: BatchConfig, epoch: int, track_subset=None):
    tids, sp = _pair_tracks(report, track_subset)
    if len(tids) < config.n1:
        return [], {}
    key = (config.seed, _SET_SHUFFLE, epoch, report.cam_i, report.cam_j)
    return _shuffled_chunks(tids, config.n1, key), dict(zip(tids.tolist(), sp.tolist()))


def _materialize(bank: "PatchBank", pair, chunk: np.ndarray, s_of) -> MatchSet:
    ids = chunk.tolist()
    return MatchSet(tuple(pair), bank.get(pair[0], ids), bank.get(pair[1], ids),
                    np.array([s_of[t] for t in ids]), chunk.copy())


def extract_match_sets(scene: SceneReconstruction, pair: Tuple[int, int], config: BatchConfig,
                       epoch: int = 0, bank: Optional[PatchBank] = None,
                       report: Optional[SimilarityReport] = None,
                       geo: GeoSimParams = GeoSimParams(),
                       track_subset: Optional[set] = None) -> List[MatchSet]:
    """Shuffle the pair's shared tracks (keyed by seed, epoch, pair) and chunk them into n1-sets.

    Leftover tracks are dropped for this epoch; pairs with fewer than n1 shared tracks yield [].
    """
    cam_i, cam_j = pair
    if report is None:
        if not scene.shared_tracks(cam_i, cam_j):
            return []
        report = image_similarity(scene, cam_i, cam_j, geo)
    chunks, s_of = _chunk_ids(report, config, epoch, track_subset)
    if not chunks:
        return []
    bank = bank or PatchBank(scene, cameras=[cam_i, cam_j])
    return [_materialize(bank, pair, c, s_of) for c in chunks]


class LazyEpoch(SequenceABC):
    """Index-addressable match sets whose patches are gathered only on access."""

    def __init__(self, builders):
        self._builders = builders

    def __len__(self):
        return len(self._builders)

    def __getitem__(self, i):
        return self._builders[i]()


class MatchSetStream:
    """Per-epoch match sets over a fixed list of image pairs (the match-set batching)."""

    def __init__(self, scene: SceneReconstruction, reports: Sequence[SimilarityReport], config: BatchConfig,
                 bank: Optional[PatchBank] = None, track_subset: Optional[set] = None):
        self.reports = list(reports)
        self.config = config
        self.bank = bank or PatchBank(scene)
        self.track_subset = track_subset

    def n_sets(self) -> int:
        return sum(len(_pair_tracks(r, self.track_subset)[0]) // self.config.n1 for r in self.reports)

    def chunks(self, e: int):
        """(image pair, track-id chunk) for every match set of epoch ``e``, in pair order."""
        out = []
        for rep in self.reports:
            chunks, _ = _chunk_ids(rep, self.config, e, self.track_subset)
            out.extend(((rep.cam_i, rep.cam_j), c) for c in chunks)
        return out

    def epoch(self, e: int) -> LazyEpoch:
        builders = []
        for rep in self.reports:
            chunks, s_of = _chunk_ids(rep, self.config, e, self.track_subset)
            pair = (rep.cam_i, rep.cam_j)
            builders.extend(partial(_materialize, self.bank, pair, c, s_of) for c in chunks)
        return LazyEpoch(builders)


class RandomPairStream:
    """Baseline batching: n1-chunks drawn uniformly from all (pair, track) entries, mixing image pairs."""

    def __init__(self, scene: SceneReconstruction, reports: Sequence[SimilarityReport], config: BatchConfig,
                 bank: Optional[PatchBank] = None, track_subset: Optional[set] = None):
        self.config = config
        self.bank = bank or PatchBank(scene)
        rows = []
        for p, rep in enumerate(reports):
            tids, sp = _pair_tracks(rep, track_subset)
            rows.append(np.column_stack([np.full(len(tids), p), np.full(len(tids), rep.cam_i),
                                         np.full(len(tids), rep.cam_j), tids, np.zeros(len(tids))]))
            rows[-1][:, 4] = sp
        self.entries = np.concatenate(rows) if rows else np.zeros((0, 5))

    def n_sets(self) -> int:
        return len(self.entries) // self.config.n1

    def _build(self, idx: np.ndarray) -> MatchSet:
        e = self.entries[idx]
        pa = np.stack([self.bank.get(int(ci), [int(t)])[0] for ci, t in zip(e[:, 1], e[:, 3])])
        pb = np.stack([self.bank.get(int(cj), [int(t)])[0] for cj, t in zip(e[:, 2], e[:, 3])])
        return MatchSet((-1, -1), pa, pb, e[:, 4].copy(), e[:, 3].astype(np.int64),
                        pair_ids=e[:, 0].astype(np.int64))

    def epoch(self, e: int) -> LazyEpoch:
        n1 = self.config.n1
        order = np.random.default_rng((self.config.seed, _SET_SHUFFLE, e, _RANDOM_POOL)).permutation(
            len(self.entries))
        return LazyEpoch([partial(self._build, order[c * n1:(c + 1) * n1]) for c in range(self.n_sets())])


class _FixedStream:
    def __init__(self, sets: Sequence[MatchSet]):
        self.sets = list(sets)

    def n_sets(self) -> int:
        return len(self.sets)

    def epoch(self, e: int) -> List[MatchSet]:
        return self.sets


def as_stream(sets):
    return sets if hasattr(sets, "epoch") else _FixedStream(sets)


def epoch_slot(n_sets: int, n2: int, step: int) -> Tuple[int, int]:
    """(epoch, batch slot within the epoch) of a global step."""
    per_epoch = n_sets // n2
    if per_epoch == 0:
        raise StreamExhausted(f"an epoch supplies {n_sets} match sets but a batch needs {n2}")
    return step // per_epoch, step % per_epoch


def select_sets(stream, config: BatchConfig, step: int) -> List[MatchSet]:
    """The n2 match sets of ``step``: a (seed, epoch)-keyed shuffle, consumed without replacement."""
    stream = as_stream(stream)
    epoch, slot = epoch_slot(stream.n_sets(), config.n2, step)
    sets = stream.epoch(epoch)
    order = np.random.default_rng((config.seed, _EPOCH_SHUFFLE, epoch)).permutation(len(sets))
    return [sets[i] for i in order[slot * config.n2:(slot + 1) * config.n2]]


def prepare_match_set(ms: MatchSet, seed_key, augment: Optional[AugmentParams]) -> MatchSet:
    """Augment each pair (keyed by ``seed_key`` + entry index) then standardise every patch."""
    pa = np.empty_like(ms.patches_a)
    pb = np.empty_like(ms.patches_b)
    for i in range(ms.n1):
        a, b = ms.patches_a[i], ms.patches_b[i]
        if augment is not None:
            a, b = augment_pair((a, b), tuple(seed_key) + (i,), augment)
        pa[i], pb[i] = a, b
    return MatchSet(ms.image_pair, standardize(pa), standardize(pb), ms.s_patch, ms.track_ids, ms.pair_ids)


def build_batch(sets, config: BatchConfig, step: int,
                augment: Optional[AugmentParams] = AugmentParams()) -> TrainingBatch:
    chosen = select_sets(sets, config, step)
    prepared = tuple(prepare_match_set(ms, (config.seed, _AUGMENT, step, k), augment)
                     for k, ms in enumerate(chosen))
    return TrainingBatch(prepared, step)
