"""Procedural multi-view scenes with exact ground truth.

Cameras sit on a horizontal ring above a textured ground plane and look at its
centre.  Every track lies on the plane, carries the plane normal, and is seen
by every camera.  Keypoint scale and orientation are the projections of a
per-track 3D scale and tangent direction, i.e. what an ideal covariant
detector would report, plus bounded noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigInvalid
from .patches import SUPPORT_K, bilinear, support_inside
from .scene import Camera, FilterParams, Keypoint, SceneReconstruction, Track, look_at_rotation, wrap_angle


@dataclass(frozen=True)
class SyntheticConfig:
    n_cameras: int = 12
    n_tracks: int = 2000
    texture_size: int = 1024
    camera_ring_radius: float = 2.0
    noise_px: float = 0.3
    camera_height: float = 2.0
    azimuth_jitter_deg: float = 4.0
    image_width: int = 640
    image_height: int = 480
    focal: float = 560.0
    plane_extent: float = 3.0
    track_region_radius: float = 1.1
    sigma_min_px: float = 1.6
    sigma_max_px: float = 3.2
    min_spacing_px: float = 4.0
    orientation_noise_deg: float = 0.0
    scale_noise: float = 0.0
    gain_range: float = 0.25
    offset_range: float = 20.0
    gamma_range: float = 1.3
    image_noise_std: float = 2.0
    tone_waves: int = 0
    invert_odd: bool = True  # odd-numbered cameras see an intensity-inverted surface
    supersample: int = 2

    def validate(self):
        if self.n_cameras < 2:
            raise ConfigInvalid("n_cameras", "n_cameras must be at least 2")
        if self.n_tracks < 1:
            raise ConfigInvalid("n_tracks", "n_tracks must be at least 1")
        if self.texture_size < 64:
            raise ConfigInvalid("texture_size", "texture_size must be at least 64")
        if not self.camera_ring_radius > 0:
            raise ConfigInvalid("camera_ring_radius", "camera_ring_radius must be positive")
        if self.camera_height <= 0:
            raise ConfigInvalid("camera_height", "camera_height must be positive")
        if not 0 <= self.noise_px <= FilterParams().max_reproj_px:
            raise ConfigInvalid("noise_px", "noise_px must lie in [0, default max_reproj_px]")
        if min(self.image_width, self.image_height) < 32:
            raise ConfigInvalid("image_width", "images must be at least 32x32")
        if not 0 < self.sigma_min_px <= self.sigma_max_px:
            raise ConfigInvalid("sigma_min_px", "invalid keypoint scale range")
        if self.supersample < 1:
            raise ConfigInvalid("supersample", "supersample must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: Dict) -> "SyntheticConfig":
        names = {f.name for f in fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigInvalid(k)
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


def make_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited multi-octave noise plus sharp-cornered blobs, values in [0, 1]."""
    tex = np.zeros((size, size))
    for sigma in (1.5, 3.0, 6.0, 12.0, 24.0):
        layer = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        tex += math.sqrt(sigma) * layer / (layer.std() + 1e-12)
    tex = (tex - tex.mean()) / (tex.std() + 1e-12)
    tex = 0.5 + 0.12 * tex

    yy, xx = np.mgrid[0:size, 0:size]
    n_blobs = int(size * size / 180.0)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, 2)
        r = float(np.exp(rng.uniform(np.log(2.0), np.log(size / 40.0))))
        val = rng.uniform(0.0, 1.0)
        x0, x1 = int(max(cx - 2 * r, 0)), int(min(cx + 2 * r + 1, size))
        y0, y1 = int(max(cy - 2 * r, 0)), int(min(cy + 2 * r + 1, size))
        if x1 <= x0 or y1 <= y0:
            continue
        sx, sy = xx[y0:y1, x0:x1] - cx, yy[y0:y1, x0:x1] - cy
        kind = rng.integers(0, 3)
        if kind == 0:
            ang = rng.uniform(0, math.pi)
            u = np.abs(sx * math.cos(ang) + sy * math.sin(ang))
            v = np.abs(-sx * math.sin(ang) + sy * math.cos(ang))
            mask = (u <= r) & (v <= r * rng.uniform(0.3, 1.0))
        elif kind == 1:
            mask = sx * sx + sy * sy <= r * r
        else:
            a = rng.uniform(0, 2 * math.pi, 3)
            px, py = r * np.cos(a), r * np.sin(a)
            d = [(sx - px[i]) * (py[(i + 1) % 3] - py[i]) - (sy - py[i]) * (px[(i + 1) % 3] - px[i])
                 for i in range(3)]
            mask = ((d[0] >= 0) & (d[1] >= 0) & (d[2] >= 0)) | ((d[0] <= 0) & (d[1] <= 0) & (d[2] <= 0))
        alpha = rng.uniform(0.5, 1.0)
        tex[y0:y1, x0:x1][mask] = (1 - alpha) * tex[y0:y1, x0:x1][mask] + alpha * val
    tex = ndimage.gaussian_filter(tex, 0.8)
    return np.clip(tex, 0.0, 1.0)


def ring_cameras(cfg: SyntheticConfig, rng: np.random.Generator):
    cams = []
    jitter = rng.uniform(-1.0, 1.0, cfg.n_cameras) * math.radians(cfg.azimuth_jitter_deg)
    for k in range(cfg.n_cameras):
        phi = 2.0 * math.pi * k / cfg.n_cameras + jitter[k]
        center = np.array([cfg.camera_ring_radius * math.cos(phi), cfg.camera_ring_radius * math.sin(phi),
                           cfg.camera_height])
        cams.append(Camera(k, center, look_at_rotation(center, (0.0, 0.0, 0.0)), cfg.focal,
                           ((cfg.image_width - 1) / 2.0, (cfg.image_height - 1) / 2.0),
                           (cfg.image_width, cfg.image_height)))
    return cams


def _plane_keypoints(cams, pts, rho, psi):
    """Ideal keypoints of plane points (n, 2) in every camera -> (n, n_cam, 4)."""
    n = len(pts)
    eps = 1e-4
    p3 = np.column_stack([pts, np.zeros(n)])
    out = np.empty((n, len(cams), 4))
    for ci, cam in enumerate(cams):
        uv, _ = cam.project_points(p3)
        ux, _ = cam.project_points(p3 + [eps, 0.0, 0.0])
        uy, _ = cam.project_points(p3 + [0.0, eps, 0.0])
        j = np.stack([(ux - uv) / eps, (uy - uv) / eps], axis=-1)  # (n, 2, 2), columns d/dX, d/dY
        det = np.abs(j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0])
        tdir = np.einsum("nij,nj->ni", j, np.column_stack([np.cos(psi), np.sin(psi)]))
        out[:, ci, 0:2] = uv
        out[:, ci, 2] = rho * np.sqrt(det)
        out[:, ci, 3] = np.arctan2(-tdir[:, 1], tdir[:, 0])
    return out


class _SpacingGrid:
    """Occupancy grids (one per camera) for a minimum projected spacing test."""

    def __init__(self, n_cams, width, height, spacing):
        self.cell = spacing / math.sqrt(2.0)
        self.spacing2 = spacing * spacing
        self.nx = int(width / self.cell) + 5
        self.ny = int(height / self.cell) + 5
        self.slot = -np.ones((n_cams, self.ny, self.nx), dtype=np.int64)
        self.xy = []
        self.cams = np.arange(n_cams)[:, None, None]
        self.offsets = np.arange(-2, 3)

    def try_add(self, xy: np.ndarray) -> bool:
        """``xy`` is (n_cams, 2); insert and return True if far enough from all points."""
        cx = (xy[:, 0] / self.cell).astype(np.int64) + 2
        cy = (xy[:, 1] / self.cell).astype(np.int64) + 2
        gy = cy[:, None, None] + self.offsets[None, :, None]
        gx = cx[:, None, None] + self.offsets[None, None, :]
        near = self.slot[self.cams, gy, gx]
        for idx in np.unique(near[near >= 0]):
            if (((self.xy[idx] - xy) ** 2).sum(-1) < self.spacing2).any():
                return False
        self.slot[np.arange(len(xy)), cy, cx] = len(self.xy)
        self.xy.append(xy)
        return True


def _sample_tracks(cfg: SyntheticConfig, cams, rng: np.random.Generator):
    d_ref = math.hypot(cfg.camera_ring_radius, cfg.camera_height)
    grid = _SpacingGrid(cfg.n_cameras, cfg.image_width, cfg.image_height, max(cfg.min_spacing_px, 1e-3))
    accepted_pts, accepted_kp = [], []
    for _ in range(40):
        n_cand = max(4 * cfg.n_tracks, 256)
        r = cfg.track_region_radius * np.sqrt(rng.uniform(0, 1, n_cand))
        a = rng.uniform(0, 2 * math.pi, n_cand)
        pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
        sig_ref = np.exp(rng.uniform(math.log(cfg.sigma_min_px), math.log(cfg.sigma_max_px), n_cand))
        rho = sig_ref * d_ref / cfg.focal
        psi = rng.uniform(-math.pi, math.pi, n_cand)
        kps = _plane_keypoints(cams, pts, rho, psi)
        # grow the support by the worst-case keypoint noise so crops stay inside after perturbation
        ok = np.ones(n_cand, bool)
        grow = (1.0 + cfg.scale_noise) * (1.0 + math.sin(math.radians(cfg.orientation_noise_deg)))
        for ci in range(cfg.n_cameras):
            grown = kps[:, ci].copy()
            grown[:, 2] *= grow
            ok &= support_inside(grown, cfg.image_width, cfg.image_height, SUPPORT_K,
                                 margin=1.0 + cfg.noise_px)
        for idx in np.flatnonzero(ok):
            if len(accepted_pts) >= cfg.n_tracks:
                break
            if grid.try_add(kps[idx, :, :2]):
                accepted_pts.append(pts[idx])
                accepted_kp.append(kps[idx])
        if len(accepted_pts) >= cfg.n_tracks:
            break
    if len(accepted_pts) < cfg.n_tracks:
        raise ConfigInvalid("n_tracks", f"could only place {len(accepted_pts)} of {cfg.n_tracks} tracks "
                                        "under the spacing and visibility constraints")
    return np.array(accepted_pts), np.array(accepted_kp)


def tone_curve(img: np.ndarray, n_waves: int, rng: np.random.Generator) -> np.ndarray:
    """Random smooth non-monotone intensity remap of [0, 1] onto [0, 1]."""
    v = np.linspace(0.0, 1.0, 1025)
    curve = np.zeros_like(v)
    for m in range(1, n_waves + 1):
        curve += rng.uniform(0.5, 1.0) / m * np.sin(np.pi * m * v + rng.uniform(0, 2 * np.pi))
    curve = (curve - curve.min()) / max(curve.max() - curve.min(), 1e-12)
    return np.interp(img, v, curve)


def render_view(cam: Camera, texture: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Render the textured plane z=0 through ``cam`` (plane-induced homography), uint8."""
    w, h, ss = cfg.image_width, cfg.image_height, cfg.supersample
    off = (np.arange(ss) + 0.5) / ss - 0.5
    acc = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    t_size = texture.shape[0]
    for oy in off:
        for ox in off:
            dx = (xs + ox - cam.principal_point[0]) / cam.focal
            dy = (ys + oy - cam.principal_point[1]) / cam.focal
            rays = np.stack([dx, dy, np.ones_like(dx)], axis=-1) @ cam.rotation  # camera -> world
            t = -cam.center[2] / rays[..., 2]
            wx = cam.center[0] + t * rays[..., 0]
            wy = cam.center[1] + t * rays[..., 1]
            tx = (wx / cfg.plane_extent + 0.5) * t_size - 0.5
            ty = (wy / cfg.plane_extent + 0.5) * t_size - 0.5
            acc += bilinear(texture, tx, ty)
    img = acc / (ss * ss)
    gain = 1.0 + rng.uniform(-1, 1) * cfg.gain_range
    gamma = float(np.exp(rng.uniform(-1, 1) * math.log(cfg.gamma_range)))
    offset = rng.uniform(-1, 1) * cfg.offset_range
    img = np.clip(img, 0.0, 1.0) ** gamma
    if cfg.tone_waves > 0:
        img = tone_curve(img, cfg.tone_waves, rng)
    if cfg.invert_odd and cam.id % 2:
        img = 1.0 - img
    img = 255.0 * img * gain + offset
    img = img + rng.standard_normal(img.shape) * cfg.image_noise_std
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _noisy_keypoint(kp: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> Keypoint:
    rad = cfg.noise_px * math.sqrt(rng.uniform())
    ang = rng.uniform(0, 2 * math.pi)
    x = kp[0] + rad * math.cos(ang)
    y = kp[1] + rad * math.sin(ang)
    s = kp[2] * (1.0 + rng.uniform(-1, 1) * cfg.scale_noise)
    th = wrap_angle(kp[3] + math.radians(rng.uniform(-1, 1) * cfg.orientation_noise_deg))
    return Keypoint(float(x), float(y), float(s), float(th))


def generate_synthetic_scene(config: SyntheticConfig = SyntheticConfig(), seed: int = 0
                             ) -> Tuple[SceneReconstruction, np.ndarray]:
    """Build a ring-of-cameras scene over a textured plane; returns (scene, texture)."""
    cfg = config.validate()
    ss = np.random.SeedSequence(int(seed))
    r_tex, r_cam, r_trk, r_kp, r_img = (np.random.default_rng(s) for s in ss.spawn(5))
    texture = make_texture(cfg.texture_size, r_tex)
    cams = ring_cameras(cfg, r_cam)
    pts, kps = _sample_tracks(cfg, cams, r_trk)
    normal = np.array([0.0, 0.0, 1.0])
    tracks = []
    for tid in range(len(pts)):
        obs = [(cams[ci].id, _noisy_keypoint(kps[tid, ci], cfg, r_kp)) for ci in range(len(cams))]
        tracks.append(Track(tid, np.array([pts[tid, 0], pts[tid, 1], 0.0]), normal, tuple(obs)))
    images = {cam.id: render_view(cam, texture, cfg, r_img) for cam in cams}
    scene = SceneReconstruction(tuple(cams), tuple(tracks), images)
    return scene, (np.clip(np.rint(texture * 255.0), 0, 255)).astype(np.uint8)
