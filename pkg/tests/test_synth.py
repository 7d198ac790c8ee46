import math
from dataclasses import replace

import numpy as np
import pytest

from geofeat.errors import ConfigInvalid
from geofeat.geosim import angle_metric, patch_similarity
from geofeat.io import encode_georec
from geofeat.patches import crop_patches, standardize
from geofeat.scene import Keypoint, Track, reprojection_errors
from geofeat.synth import SyntheticConfig, generate_synthetic_scene, tone_curve

from conftest import SMALL


def test_deterministic_bytes():
    cfg = replace(SMALL, n_cameras=2, n_tracks=1)
    s1, t1 = generate_synthetic_scene(cfg, 7)
    s2, t2 = generate_synthetic_scene(cfg, 7)
    assert encode_georec(s1) == encode_georec(s2)
    assert np.array_equal(t1, t2)
    assert all(np.array_equal(s1.images[c], s2.images[c]) for c in s1.images)
    s3, _ = generate_synthetic_scene(cfg, 8)
    assert encode_georec(s3) != encode_georec(s1)


def test_track_count_and_full_visibility():
    cfg = replace(SMALL, n_tracks=100)
    scene, _ = generate_synthetic_scene(cfg, 1)
    assert len(scene.tracks) == 100
    assert all(len(t.observations) == cfg.n_cameras for t in scene.tracks)


def test_keypoints_reproject_within_noise(small_scene):
    cams = small_scene.camera_index
    worst = max(reprojection_errors(cams, t).max() for t in small_scene.tracks)
    assert worst <= SMALL.noise_px + 1e-9


def test_symmetric_twin_scores_ring_angle():
    cfg = replace(SMALL, azimuth_jitter_deg=0.0)
    scene, _ = generate_synthetic_scene(cfg, 2)
    centre = Track(-1, (0, 0, 0), (0, 0, 1), ((0, Keypoint(0, 0, 1, 0)), (2, Keypoint(0, 0, 1, 0))))
    c0, c2 = scene.camera(0), scene.camera(2)
    ring_angle = 2 * math.degrees(math.atan2(cfg.camera_ring_radius, cfg.camera_height))
    s, s1, s2 = patch_similarity(c0, c2, centre)
    assert s2 == pytest.approx(1.0, abs=1e-12)
    assert s == pytest.approx(angle_metric(ring_angle, 15.0), abs=1e-9)


def test_corresponding_patches_look_alike(small_scene):
    a, b = 0, 2  # same intensity polarity
    ids = [t.id for t in small_scene.tracks]
    ka = np.array([t.keypoint_in(a).as_array() for t in small_scene.tracks])
    kb = np.array([t.keypoint_in(b).as_array() for t in small_scene.tracks])
    pa = standardize(crop_patches(small_scene.images[a], ka)).reshape(len(ids), -1)
    pb = standardize(crop_patches(small_scene.images[b], kb)).reshape(len(ids), -1)
    ncc = pa @ pb.T / pa.shape[1]
    assert np.mean(np.diag(ncc)) > 0.5
    assert np.mean(np.diag(ncc)) > np.mean(np.abs(ncc[~np.eye(len(ids), dtype=bool)])) + 0.3


def test_odd_cameras_inverted(small_scene):
    ka = np.array([t.keypoint_in(0).as_array() for t in small_scene.tracks])
    kb = np.array([t.keypoint_in(1).as_array() for t in small_scene.tracks])
    pa = standardize(crop_patches(small_scene.images[0], ka)).reshape(len(ka), -1)
    pb = standardize(crop_patches(small_scene.images[1], kb)).reshape(len(kb), -1)
    assert np.mean((pa * pb).mean(axis=1)) < -0.5


def test_tone_curve_spans_unit_range(rng):
    x = np.linspace(0, 1, 500)
    y = tone_curve(x, 3, rng)
    assert y.min() == pytest.approx(0.0, abs=1e-3) and y.max() == pytest.approx(1.0, abs=1e-3)
    assert np.all((y >= 0) & (y <= 1))


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        SyntheticConfig(n_cameras=1).validate()
    with pytest.raises(ConfigInvalid) as err:
        SyntheticConfig.from_dict({"n_tracks": 5, "bogus": 1})
    assert err.value.key == "bogus"
    assert SyntheticConfig.from_dict(SyntheticConfig().to_dict()) == SyntheticConfig()


def test_too_many_tracks_is_reported():
    with pytest.raises(ConfigInvalid):
        generate_synthetic_scene(replace(SMALL, n_tracks=50, min_spacing_px=40.0), 0)
