import numpy as np
import pytest

from geofeat import io, net, pipeline
from geofeat.config import load_config
from geofeat.evaluation import DescriptorSet


def micro_cfg(**kw):
    base = {"arch": "micro", "grid_size": "8", "n1": "8", "n2": "2", "steps": "4", "holdout_pairs": "0:1,1:3"}
    base.update({k: str(v) for k, v in kw.items()})
    return load_config(overrides=base)


def test_track_split_halves(small_scene):
    train, test = pipeline.track_split(small_scene)
    ids = {t.id for t in small_scene.tracks}
    assert train | test == ids and not train & test
    assert abs(len(train) - len(test)) <= 1
    assert max(small_scene.tracks[i].position[0] for i in train) < min(
        small_scene.tracks[i].position[0] for i in test)
    assert pipeline.track_split(small_scene, False) == (None, ids)


def test_training_pairs_exclude_holdout(small_scene):
    cfg = micro_cfg()
    pairs = {(r.cam_i, r.cam_j) for r in pipeline.training_reports(small_scene, cfg)}
    assert not pairs & {(0, 1), (1, 3)}
    assert all(r.s_image <= 0.85 for r in pipeline.training_reports(small_scene, cfg))


def test_keypoint_tracks_recover_ids(small_scene):
    obs = small_scene.observations_in(2)
    kps = np.array([kp.as_array() for _, kp in obs])
    assert pipeline.keypoint_tracks(small_scene, 2, kps).tolist() == [t for t, _ in obs]
    assert pipeline.keypoint_tracks(small_scene, 2, np.array([[-50.0, -50.0, 1, 0]])).tolist() == [-1]


def test_oracle_descriptors_score_perfectly(small_scene):
    cfg = micro_cfg()
    ids = sorted(t.id for t in small_scene.tracks)
    eye = np.eye(len(ids), dtype=np.float32)

    def oracle(cam):
        obs = small_scene.observations_in(cam)
        kps = np.array([kp.as_array() for _, kp in obs])
        tracks = np.array([t for t, _ in obs])
        return DescriptorSet(cam, kps, eye[[ids.index(t) for t in tracks]]), tracks

    (da, ta), (db, _) = oracle(0), oracle(1)
    ev = pipeline.evaluate_descriptor_pair(small_scene, da, db, ta, cfg)
    assert ev.metrics["precision"] == 1.0 and ev.metrics["recall"] == 1.0
    assert ev.row()[0] == "0-1" and pipeline.format_report([ev]).count("\n") == 2


def test_training_is_bit_reproducible(small_scene):
    cfg = micro_cfg(seed=3)
    a = pipeline.train_model(small_scene, cfg)
    b = pipeline.train_model(small_scene, cfg)
    assert a.losses == b.losses and len(a.losses) == 4
    assert io.encode_gdnw(a.params) == io.encode_gdnw(b.params)
    assert io.encode_gdnw(a.params) != io.encode_gdnw(net.params_for("micro", 3))


def test_evaluate_pairs_on_test_tracks(small_scene):
    cfg = micro_cfg()
    params, _ = pipeline.initial_state(cfg)
    evals = pipeline.evaluate_pairs(params, small_scene, cfg)
    _, test = pipeline.track_split(small_scene)
    assert [e.pair for e in evals] == [(0, 1), (1, 3)]
    assert all(e.n_features == len(test) for e in evals)
    assert 0.0 <= pipeline.mean_precision(evals) <= 1.0


def test_random_batching_stream(small_scene):
    cfg = micro_cfg(batching="random", objective="hardest")
    stream = pipeline.make_stream(small_scene, cfg)
    assert stream.bank.g_size == 8
    assert len(pipeline.train_model(small_scene, cfg, stream).losses) == 4
