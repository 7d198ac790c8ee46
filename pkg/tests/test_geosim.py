import math

import numpy as np
import pytest

from geofeat.errors import DegenerateGeometry, NoSharedTracks, ValidationError
from geofeat.geosim import (GeoSimParams, SimilarityReport, all_pair_reports, angle_metric, format_report_line,
                            image_similarity, patch_angles, patch_similarity, prune_pairs,
                            similarity_from_angles)
from geofeat.scene import Camera, Keypoint, SceneReconstruction, Track, look_at_rotation, rigid_transform_scene


def camera_at(cid, center, target=(0, 0, 0)):
    return Camera(cid, center, look_at_rotation(center, target, up=(0, 1, 0)), 500.0, (320, 240), (640, 480))


def track_at(tid, pos, normal=(0, 0, 1), cams=(0, 1)):
    return Track(tid, pos, normal, tuple((c, Keypoint(320, 240, 2.0, 0.0)) for c in cams))


def mirror_pair(half_deg, dist=5.0):
    h = math.radians(half_deg)
    return (camera_at(0, (-dist * math.sin(h), 0, dist * math.cos(h))),
            camera_at(1, (dist * math.sin(h), 0, dist * math.cos(h))))


def test_g_values():
    assert angle_metric(0, 15) == 1.0
    assert angle_metric(15, 15) == pytest.approx(math.exp(-0.5), abs=1e-9)
    assert angle_metric(30, 15) == pytest.approx(math.exp(-2), abs=1e-9)
    assert angle_metric(15, 15) == pytest.approx(0.606531, abs=5e-7)
    assert angle_metric(30, 15) == pytest.approx(0.135335, abs=5e-7)
    with pytest.raises(ValidationError):
        angle_metric(1.0, 0.0)


def test_coincident_cameras_score_one():
    c0 = camera_at(0, (1, 2, 5))
    c1 = camera_at(1, (1, 2, 5))
    s, s1, s2 = patch_similarity(c0, c1, track_at(0, (0, 0, 0)))
    assert (s, s1, s2) == (1.0, 1.0, 1.0)


def test_closed_form_product():
    s, s1, s2 = similarity_from_angles(15.0, 20.0)
    assert s == pytest.approx(math.exp(-0.5) * math.exp(-0.5), abs=1e-9)
    assert s == pytest.approx(0.367879, abs=5e-7)


def test_mirror_cameras_thirty_degrees():
    c0, c1 = mirror_pair(15.0)
    inter, dinc = patch_angles(c0, c1, track_at(0, (0, 0, 0)))
    assert inter == pytest.approx(30.0, abs=1e-9) and dinc == pytest.approx(0.0, abs=1e-9)
    s, _, _ = patch_similarity(c0, c1, track_at(0, (0, 0, 0)))
    assert s == pytest.approx(math.exp(-2), abs=1e-9)


def test_same_side_cameras_incidence_difference():
    # cameras at 10 and 30 degrees from the normal on the same side: both angles are 20
    c0 = camera_at(0, (5 * math.sin(math.radians(10)), 0, 5 * math.cos(math.radians(10))))
    c1 = camera_at(1, (5 * math.sin(math.radians(30)), 0, 5 * math.cos(math.radians(30))))
    inter, dinc = patch_angles(c0, c1, track_at(0, (0, 0, 0)))
    assert inter == pytest.approx(20.0, abs=1e-9) and dinc == pytest.approx(20.0, abs=1e-9)
    s, s1, s2 = patch_similarity(c0, c1, track_at(0, (0, 0, 0)))
    assert s1 == pytest.approx(math.exp(-200 / 225), abs=1e-12)
    assert s2 == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_camera_on_track_is_degenerate():
    with pytest.raises(DegenerateGeometry):
        patch_angles(camera_at(0, (0, 0, 5)), camera_at(1, (0, 0, 5)), track_at(0, (0, 0, 5)))


def _height_for(alpha_deg, x=1.0, z=5.0):
    """Height on the axis where mirror cameras at (+-x, 0, z) meet at ``alpha_deg``."""
    return z - x / math.tan(math.radians(alpha_deg) / 2)


def _scene(values):
    cams = (Camera(0, (-1, 0, 5), look_at_rotation((-1, 0, 5), (0, 0, 0), (0, 1, 0)), 500, (320, 240), (640, 480)),
            Camera(1, (1, 0, 5), look_at_rotation((1, 0, 5), (0, 0, 0), (0, 1, 0)), 500, (320, 240), (640, 480)))
    tracks = []
    for n, v in enumerate(values):
        alpha = 15.0 * math.sqrt(-2 * math.log(v))
        tracks.append(track_at(n, (0, 0, _height_for(alpha))))
    return SceneReconstruction(cams, tuple(tracks))


def test_image_similarity_is_mean():
    rep = image_similarity(_scene([0.5]), 0, 1)
    assert rep.s_image == pytest.approx(0.5, abs=1e-12)
    rep = image_similarity(_scene([0.8, 0.4]), 0, 1)
    assert np.allclose(rep.s_patch, [0.8, 0.4], atol=1e-12)
    assert rep.s_image == pytest.approx(0.6, abs=1e-12)
    assert format_report_line(rep) == "0 1 2 0.600000"


def test_identical_cameras_image_similarity_one():
    c = Camera(0, (0, 0, 5), np.diag([1.0, -1.0, -1.0]), 500, (320, 240), (640, 480))
    c2 = Camera(1, (0, 0, 5), np.diag([1.0, -1.0, -1.0]), 500, (320, 240), (640, 480))
    scene = SceneReconstruction((c, c2), tuple(track_at(n, (0.1 * n, 0, 0)) for n in range(5)))
    assert image_similarity(scene, 0, 1).s_image == 1.0


def test_no_shared_tracks():
    cams = (camera_at(0, (0, 0, 5)), camera_at(1, (1, 0, 5)), camera_at(2, (2, 0, 5)))
    scene = SceneReconstruction(cams, (track_at(0, (0, 0, 0), cams=(0, 1)),))
    with pytest.raises(NoSharedTracks):
        image_similarity(scene, 0, 2)
    assert [(r.cam_i, r.cam_j) for r in all_pair_reports(scene)] == [(0, 1)]


def test_rigid_motion_invariance(small_scene, rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    moved = rigid_transform_scene(small_scene, q, rng.uniform(-10, 10, 3))
    for a, b in [(0, 1), (1, 3)]:
        r0 = image_similarity(small_scene, a, b)
        r1 = image_similarity(moved, a, b)
        assert np.abs(r0.s_patch - r1.s_patch).max() <= 1e-9


def _report(s):
    return SimilarityReport(0, 1, (0,), np.array([s]), np.array([1.0]), np.array([s]))


def test_prune_rule():
    kept = prune_pairs([_report(0.9), _report(0.85), _report(0.2)])
    assert [r.s_image for r in kept] == [0.85, 0.2]
    assert prune_pairs([]) == []
    triples = [(0, 1, _report(0.86)), (0, 2, _report(0.5))]
    assert prune_pairs(triples) == [triples[1]]
    assert prune_pairs([_report(0.9)], GeoSimParams(prune_threshold=0.95)) != []


def test_params_validation():
    with pytest.raises(ValidationError):
        GeoSimParams(sigma1=0)
    with pytest.raises(ValidationError):
        GeoSimParams(prune_threshold=1.5)
