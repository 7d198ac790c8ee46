"""End-to-end glue: training protocol, descriptor extraction and pair evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import net
from .batching import MatchSetStream, PatchBank, RandomPairStream, build_batch
from .config import PipelineConfig
from .errors import ValidationError
from .evaluation import (DescriptorSet, GroundTruth, match_descriptors, matching_metrics,
                         ratio_candidates)
from .geosim import SimilarityReport, all_pair_reports, prune_pairs
from .patches import crop_patches, standardize
from .scene import SceneReconstruction

REPORT_COLUMNS = ("pair", "features", "putative", "inliers", "matching_score", "recall", "precision")


# --- protocol ---------------------------------------------------------------

def track_split(scene: SceneReconstruction, enabled: bool = True) -> Tuple[Optional[Set[int]], Set[int]]:
    """(training track ids, evaluation track ids).

    With the split enabled, tracks left of the median world x train and the
    rest evaluate, so held-out pairs are scored on surface never seen in training.
    Without it every track is used for both (training set ``None`` = all).
    """
    ids = np.array([t.id for t in scene.tracks])
    if not enabled:
        return None, set(ids.tolist())
    xs = np.array([t.position[0] for t in scene.tracks])
    cut = np.median(xs)
    return set(ids[xs < cut].tolist()), set(ids[xs >= cut].tolist())


def holdout_pairs(scene: SceneReconstruction, cfg: PipelineConfig) -> List[Tuple[int, int]]:
    known = {c.id for c in scene.cameras}
    pairs = [p for p in cfg.holdout() if p[0] in known and p[1] in known and p[0] != p[1]]
    return pairs


def training_reports(scene: SceneReconstruction, cfg: PipelineConfig,
                     reports: Optional[Sequence[SimilarityReport]] = None) -> List[SimilarityReport]:
    """Similarity reports of the training pairs: all pairs minus held-out ones, then pruned."""
    held = set(holdout_pairs(scene, cfg))
    geo = cfg.geo_params()
    reports = all_pair_reports(scene, geo) if reports is None else reports
    keep = [r for r in reports if (min(r.cam_i, r.cam_j), max(r.cam_i, r.cam_j)) not in held]
    return prune_pairs(keep, geo)


def make_stream(scene: SceneReconstruction, cfg: PipelineConfig, bank: Optional[PatchBank] = None,
                reports: Optional[Sequence[SimilarityReport]] = None):
    train_ids, _ = track_split(scene, cfg.split_tracks)
    reps = training_reports(scene, cfg, reports)
    if not reps:
        raise ValidationError("no image pair survives holdout and pruning")
    bank = bank or PatchBank(scene, g_size=net.ARCHS[cfg.arch][1], k=cfg.support_k)
    kind = MatchSetStream if cfg.batching == "match_set" else RandomPairStream
    return kind(scene, reps, cfg.batch_config(), bank, train_ids)


# --- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: net.NetParams
    opt: net.OptimizerState
    losses: List[float] = field(default_factory=list)


def initial_state(cfg: PipelineConfig) -> Tuple[net.NetParams, net.OptimizerState]:
    params = net.params_for(cfg.arch, cfg.seed)
    opt = net.init_optimizer(params, base_lr=cfg.lr, weight_decay=cfg.weight_decay,
                             decay=cfg.lr_decay, decay_every=cfg.lr_decay_every)
    return params, opt


def train_model(scene: SceneReconstruction, cfg: PipelineConfig, stream=None,
                progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps from the seeded initialisation."""
    params, opt = initial_state(cfg)
    stream = stream or make_stream(scene, cfg)
    bc = cfg.batch_config()
    objective = cfg.objective_spec()
    augment = cfg.augment_params()
    losses = []
    for step in range(cfg.steps):
        batch = build_batch(stream, bc, step, augment)
        params, opt, loss = net.train_step(params, opt, batch, objective)
        losses.append(loss)
        if progress is not None:
            progress(step, loss)
    return TrainResult(params, opt, losses)


# --- descriptors ------------------------------------------------------------

def describe_image(params: net.NetParams, scene: SceneReconstruction, camera_id: int,
                   track_ids: Optional[Set[int]] = None, k: float = 12.0) -> Tuple[DescriptorSet, np.ndarray]:
    """Descriptors of the image's keypoints (optionally only those of ``track_ids``).

    Returns the descriptor set and the track id of every row.
    """
    obs = [(t, kp) for t, kp in scene.observations_in(camera_id) if track_ids is None or t in track_ids]
    if not obs:
        raise ValidationError(f"camera {camera_id} has no keypoints to describe")
    kps = np.array([kp.as_array() for _, kp in obs])
    patches = standardize(crop_patches(scene.images[camera_id], kps, params.in_size, k))
    return DescriptorSet(camera_id, kps, net.forward(params, patches)), np.array([t for t, _ in obs])


def keypoint_tracks(scene: SceneReconstruction, camera_id: int, keypoints: np.ndarray,
                    tol_px: float = 1e-3) -> np.ndarray:
    """Track id of each keypoint found among the camera's observations (-1 when absent)."""
    obs = scene.observations_in(camera_id)
    if not obs:
        return np.full(len(keypoints), -1)
    ref = np.array([[kp.x, kp.y] for _, kp in obs])
    tids = np.array([t for t, _ in obs])
    out = np.full(len(keypoints), -1)
    for n, (x, y) in enumerate(np.asarray(keypoints)[:, :2]):
        d2 = (ref[:, 0] - x) ** 2 + (ref[:, 1] - y) ** 2
        j = int(d2.argmin())
        if d2[j] <= tol_px * tol_px:
            out[n] = tids[j]
    return out


def pair_ground_truth(scene: SceneReconstruction, cam_b: int, tracks_a: Sequence[int],
                      keypoints_b: np.ndarray, tol_px: float = 3.0) -> GroundTruth:
    """True correspondences: b-keypoints within ``tol_px`` of the a-feature's 3D point projected into b."""
    cam = scene.camera(cam_b)
    by_id = {t.id: t for t in scene.tracks}
    pts = np.array([by_id[t].position if t in by_id else np.full(3, np.nan) for t in tracks_a])
    uv, z = cam.project_points(pts)
    inside = (z > 1e-9) & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height)
    uv[~inside] = np.nan
    return GroundTruth.from_projection(uv, keypoints_b, tol_px)


# --- evaluation -------------------------------------------------------------

@dataclass(frozen=True)
class PairEvaluation:
    pair: Tuple[int, int]
    metrics: Dict[str, float]
    n_features: int

    def row(self) -> List[str]:
        m = self.metrics
        return [f"{self.pair[0]}-{self.pair[1]}", str(self.n_features), str(m["putative"]), str(m["inliers"]),
                f"{m['matching_score']:.6f}", f"{m['recall']:.6f}", f"{m['precision']:.6f}"]


def restrict(ds: DescriptorSet, tracks: np.ndarray, keep: Optional[Set[int]]):
    if keep is None:
        return ds, tracks
    mask = np.array([t in keep for t in tracks.tolist()], dtype=bool)
    return DescriptorSet(ds.image_id, ds.keypoints[mask], ds.vectors[mask]), tracks[mask]


def evaluate_descriptor_pair(scene: SceneReconstruction, a: DescriptorSet, b: DescriptorSet,
                             tracks_a: np.ndarray, cfg: PipelineConfig) -> PairEvaluation:
    gt = pair_ground_truth(scene, b.image_id, tracks_a.tolist(), b.keypoints, cfg.gt_tol_px)
    result = match_descriptors(a, b, mutual=cfg.mutual, ratio=cfg.ratio or None)
    return PairEvaluation((a.image_id, b.image_id), matching_metrics(result, gt, len(a)), len(a))


def evaluate_pairs(params: net.NetParams, scene: SceneReconstruction, cfg: PipelineConfig,
                   pairs: Optional[Sequence[Tuple[int, int]]] = None) -> List[PairEvaluation]:
    """Score the held-out pairs on the evaluation tracks."""
    _, test_ids = track_split(scene, cfg.split_tracks)
    pairs = holdout_pairs(scene, cfg) if pairs is None else pairs
    cache = {}

    def desc(cam):
        if cam not in cache:
            cache[cam] = describe_image(params, scene, cam, test_ids, cfg.support_k)
        return cache[cam]

    out = []
    for i, j in pairs:
        (da, ta), (db, _) = desc(i), desc(j)
        out.append(evaluate_descriptor_pair(scene, da, db, ta, cfg))
    return out


def mean_precision(evals: Sequence[PairEvaluation]) -> float:
    return float(np.mean([e.metrics["precision"] for e in evals]))


def pair_candidates(scene: SceneReconstruction, a: DescriptorSet, b: DescriptorSet, tracks_a: np.ndarray,
                    cfg: PipelineConfig) -> np.ndarray:
    """Ratio-test candidates (d1, d2, inlier) of one pair for calibration."""
    gt = pair_ground_truth(scene, b.image_id, tracks_a.tolist(), b.keypoints, cfg.gt_tol_px)
    return ratio_candidates(a, b, lambda i, j: (i, j) in gt)


def format_report(evals: Sequence[PairEvaluation]) -> str:
    lines = ["\t".join(REPORT_COLUMNS)] + ["\t".join(e.row()) for e in evals]
    return "\n".join(lines) + "\n"
