"""Cameras, tracks and observations, plus projection and track filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NonPositiveDepth, ValidationError

ORTHO_TOL = 1e-9
NORMAL_TOL = 1e-9


def _frozen(a, shape=None):
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.scale, self.orientation])


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` maps world to camera coordinates."""

    id: int
    center: np.ndarray
    rotation: np.ndarray
    focal: float
    principal_point: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "principal_point", _frozen(self.principal_point, (2,)))
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValidationError(f"camera {self.id}: rotation is not a proper orthonormal matrix")
        if not self.focal > 0:
            raise ValidationError(f"camera {self.id}: focal must be positive")
        if min(self.image_size) < 32:
            raise ValidationError(f"camera {self.id}: image size must be at least 32x32")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def project_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorised projection of (n, 3) world points; no depth check."""
        pc = self.to_camera_frame(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = self.principal_point + self.focal * pc[..., :2] / z[..., None]
        return uv, z


@dataclass(frozen=True)
class Track:
    id: int
    position: np.ndarray
    normal: np.ndarray
    observations: Tuple[Tuple[int, Keypoint], ...]

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        object.__setattr__(self, "normal", _frozen(self.normal, (3,)))
        object.__setattr__(self, "observations", tuple((int(c), kp) for c, kp in self.observations))
        if abs(np.linalg.norm(self.normal) - 1.0) > NORMAL_TOL:
            raise ValidationError(f"track {self.id}: normal is not unit length")
        if len(self.observations) < 2:
            raise ValidationError(f"track {self.id}: needs at least two observations")
        cams = [c for c, _ in self.observations]
        if len(set(cams)) != len(cams):
            raise ValidationError(f"track {self.id}: camera observed more than once")

    def keypoint_in(self, camera_id: int) -> Optional[Keypoint]:
        for c, kp in self.observations:
            if c == camera_id:
                return kp
        return None

    @property
    def camera_ids(self) -> Tuple[int, ...]:
        return tuple(c for c, _ in self.observations)


@dataclass(frozen=True)
class SceneReconstruction:
    cameras: Tuple[Camera, ...]
    tracks: Tuple[Track, ...]
    # camera id -> uint8 raster (height, width); may be empty for geometry-only scenes
    images: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "tracks", tuple(self.tracks))
        object.__setattr__(self, "images", dict(self.images))
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate camera id")
        known = set(ids)
        for t in self.tracks:
            for c, _ in t.observations:
                if c not in known:
                    raise ValidationError(f"track {t.id}: observation references unknown camera id {c}")
        for c in self.images:
            if c not in known:
                raise ValidationError(f"image references unknown camera id {c}")

    def camera(self, camera_id: int) -> Camera:
        for c in self.cameras:
            if c.id == camera_id:
                return c
        raise KeyError(camera_id)

    @property
    def camera_index(self) -> Dict[int, Camera]:
        return {c.id: c for c in self.cameras}

    def shared_tracks(self, cam_i: int, cam_j: int) -> Tuple[Track, ...]:
        return tuple(t for t in self.tracks if cam_i in t.camera_ids and cam_j in t.camera_ids)

    def observations_in(self, camera_id: int) -> Tuple[Tuple[int, Keypoint], ...]:
        """(track_id, keypoint) for every track seen by ``camera_id``, in track order."""
        out = []
        for t in self.tracks:
            kp = t.keypoint_in(camera_id)
            if kp is not None:
                out.append((t.id, kp))
        return tuple(out)


def project_track(camera: Camera, track: Track) -> Tuple[np.ndarray, float]:
    """Project a track into ``camera``; returns (pixel, depth)."""
    pc = camera.to_camera_frame(track.position)
    depth = float(pc[2])
    if depth <= 1e-9:
        raise NonPositiveDepth(f"track {track.id} has depth {depth:g} in camera {camera.id}")
    pixel = camera.principal_point + camera.focal * pc[:2] / depth
    return pixel, depth


def ray_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two 3-vectors in degrees, via atan2 for stability."""
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b))))


@dataclass(frozen=True)
class FilterParams:
    min_angle_deg: float = 2.0
    min_track_len: int = 2
    max_reproj_px: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.min_angle_deg < 90.0:
            raise ValidationError("min_angle_deg must lie in (0, 90)")
        if self.min_track_len < 2:
            raise ValidationError("min_track_len must be at least 2")


def max_intersection_angle_deg(scene_cams: Mapping[int, Camera], track: Track) -> float:
    rays = [scene_cams[c].center - track.position for c in track.camera_ids]
    best = 0.0
    for i in range(len(rays)):
        for j in range(i + 1, len(rays)):
            best = max(best, ray_angle_deg(rays[i], rays[j]))
    return best


def reprojection_errors(scene_cams: Mapping[int, Camera], track: Track) -> np.ndarray:
    errs = []
    for c, kp in track.observations:
        try:
            pix, _ = project_track(scene_cams[c], track)
        except NonPositiveDepth:
            errs.append(math.inf)
            continue
        errs.append(math.hypot(pix[0] - kp.x, pix[1] - kp.y))
    return np.array(errs)


def filter_tracks(scene: SceneReconstruction, params: FilterParams = FilterParams()) -> SceneReconstruction:
    """Keep tracks with enough triangulation angle, length and reprojection accuracy.

    A simplified reliability filter: cameras and images pass through unchanged.
    """
    cams = scene.camera_index
    kept = []
    for t in scene.tracks:
        if len(t.observations) < params.min_track_len:
            continue
        if reprojection_errors(cams, t).max() > params.max_reproj_px:
            continue
        if max_intersection_angle_deg(cams, t) < params.min_angle_deg:
            continue
        kept.append(t)
    return replace(scene, tracks=tuple(kept))


def rigid_transform_scene(scene: SceneReconstruction, rotation: np.ndarray,
                          translation: np.ndarray) -> SceneReconstruction:
    """Apply x -> R x + t to the world; image observations are unaffected."""
    r = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    cams = []
    for c in scene.cameras:
        rot = c.rotation @ r.T
        # re-orthonormalise to keep the 1e-9 invariant under accumulated round-off
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        cams.append(replace(c, center=r @ c.center + t, rotation=rot))
    tracks = [replace(tr, position=r @ tr.position + t, normal=_unit(r @ tr.normal)) for tr in scene.tracks]
    return replace(scene, cameras=tuple(cams), tracks=tuple(tracks))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def look_at_rotation(center: Sequence[float], target: Sequence[float],
                     up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with +z toward ``target`` and +y pointing image-down."""
    c = np.asarray(center, dtype=np.float64)
    fwd = _unit(np.asarray(target, dtype=np.float64) - c)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right = _unit(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    u, _, vt = np.linalg.svd(rot)
    return u @ vt
