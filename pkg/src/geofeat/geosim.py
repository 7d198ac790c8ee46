"""Geometric patch/image similarity and similarity-based pair pruning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DegenerateGeometry, NoSharedTracks, ValidationError
from .scene import Camera, SceneReconstruction, Track, ray_angle_deg


@dataclass(frozen=True)
class GeoSimParams:
    sigma1: float = 15.0  # degrees, ray intersection angle
    sigma2: float = 20.0  # degrees, incidence angle difference
    prune_threshold: float = 0.85

    def __post_init__(self):
        if not (self.sigma1 > 0 and self.sigma2 > 0):
            raise ValidationError("sigma1 and sigma2 must be positive")
        if not 0.0 < self.prune_threshold <= 1.0:
            raise ValidationError("prune_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class SimilarityReport:
    cam_i: int
    cam_j: int
    track_ids: Tuple[int, ...]
    s1: np.ndarray
    s2: np.ndarray
    s_patch: np.ndarray

    @property
    def n_shared(self) -> int:
        return len(self.track_ids)

    @property
    def s_image(self) -> float:
        return float(np.mean(self.s_patch))


def angle_metric(alpha, sigma):
    """g(alpha, sigma) = exp(-alpha^2 / (2 sigma^2)), angles in degrees."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValidationError("sigma must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    out = np.exp(-alpha * alpha / (2.0 * np.asarray(sigma, dtype=np.float64) ** 2))
    return float(out) if out.ndim == 0 else out


def patch_angles(cam_i: Camera, cam_j: Camera, track: Track) -> Tuple[float, float]:
    """(ray intersection angle, |incidence angle difference|) at the track, in degrees."""
    ri = cam_i.center - track.position
    rj = cam_j.center - track.position
    if np.linalg.norm(ri) < 1e-12 or np.linalg.norm(rj) < 1e-12:
        raise DegenerateGeometry(f"a camera center coincides with track {track.id}")
    inter = ray_angle_deg(ri, rj)
    inc_i = ray_angle_deg(ri, track.normal)
    inc_j = ray_angle_deg(rj, track.normal)
    return inter, abs(inc_i - inc_j)


def patch_similarity(cam_i: Camera, cam_j: Camera, track: Track,
                     params: GeoSimParams = GeoSimParams()) -> Tuple[float, float, float]:
    """Return (s_patch, s1, s2) for a track seen by two cameras."""
    return similarity_from_angles(*patch_angles(cam_i, cam_j, track), params)


def similarity_from_angles(intersection_deg, incidence_diff_deg,
                           params: GeoSimParams = GeoSimParams()) -> Tuple[float, float, float]:
    """(s_patch, s1, s2) from the two angles directly."""
    s1 = angle_metric(intersection_deg, params.sigma1)
    s2 = angle_metric(incidence_diff_deg, params.sigma2)
    return s1 * s2, s1, s2


def image_similarity(scene: SceneReconstruction, cam_i: int, cam_j: int,
                     params: GeoSimParams = GeoSimParams()) -> SimilarityReport:
    ci, cj = scene.camera(cam_i), scene.camera(cam_j)
    shared = scene.shared_tracks(cam_i, cam_j)
    if not shared:
        raise NoSharedTracks(f"cameras {cam_i} and {cam_j} share no tracks")
    s1 = np.empty(len(shared))
    s2 = np.empty(len(shared))
    for n, t in enumerate(shared):
        _, s1[n], s2[n] = patch_similarity(ci, cj, t, params)
    return SimilarityReport(cam_i, cam_j, tuple(t.id for t in shared), s1, s2, s1 * s2)


def all_pair_reports(scene: SceneReconstruction, params: GeoSimParams = GeoSimParams(),
                     min_shared: int = 1) -> List[SimilarityReport]:
    """Reports for every camera pair (i < j by id order) that shares at least ``min_shared`` tracks."""
    ids = [c.id for c in scene.cameras]
    out = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            if len(scene.shared_tracks(ids[a], ids[b])) >= max(min_shared, 1):
                out.append(image_similarity(scene, ids[a], ids[b], params))
    return out


def prune_pairs(pairs: Sequence, params: GeoSimParams = GeoSimParams()) -> list:
    """Drop pairs whose image similarity is strictly above the threshold; order is kept.

    Items are SimilarityReport objects or (cam_i, cam_j, SimilarityReport) tuples.
    """
    out = []
    for item in pairs:
        report = item[2] if isinstance(item, tuple) else item
        if not report.s_image > params.prune_threshold:
            out.append(item)
    return out


def format_report_line(report: SimilarityReport) -> str:
    return f"{report.cam_i} {report.cam_j} {report.n_shared} {report.s_image:.6f}"

