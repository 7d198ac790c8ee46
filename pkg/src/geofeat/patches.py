"""Similarity-normalised patch cropping, standardisation and pair augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import NonPositiveScale, OutOfBounds, ValidationError
from .scene import Keypoint

SUPPORT_K = 12.0
GRID_SIZE = 32
STD_EPS = 1e-8


@dataclass(frozen=True)
class SamplingGrid:
    g_size: int
    xt: np.ndarray  # (G, G), varies along columns
    yt: np.ndarray  # (G, G), varies along rows


def sampling_grid(g_size: int = GRID_SIZE) -> SamplingGrid:
    if g_size < 2:
        raise ValidationError("grid size must be at least 2")
    lin = np.linspace(-1.0, 1.0, g_size)
    yt, xt = np.meshgrid(lin, lin, indexing="ij")
    return SamplingGrid(g_size, xt, yt)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray
    source: Optional[Tuple[int, Keypoint]] = None


def source_coordinates(kp, g_size: int = GRID_SIZE, k: float = SUPPORT_K):
    """Image coordinates sampled for each output grid point.

    ``kp`` is a Keypoint or an (n, 4) array of (x, y, sigma, theta); returns
    (xs, ys) with shape (G, G) or (n, G, G).
    """
    grid = sampling_grid(g_size)
    arr = np.atleast_2d(kp.as_array() if isinstance(kp, Keypoint) else np.asarray(kp, dtype=np.float64))
    x, y, s, th = (arr[:, i, None, None] for i in range(4))
    half = k * s / 2.0
    c, sn = np.cos(th), np.sin(th)
    xs = half * c * grid.xt + half * sn * grid.yt + x
    ys = -half * sn * grid.xt + half * c * grid.yt + y
    if isinstance(kp, Keypoint) or np.ndim(kp) == 1:
        return xs[0], ys[0]
    return xs, ys


def support_inside(kps: np.ndarray, width: int, height: int, k: float = SUPPORT_K,
                   margin: float = 0.0) -> np.ndarray:
    """True where the rotated square support of each keypoint lies inside the image."""
    kps = np.atleast_2d(np.asarray(kps, dtype=np.float64))
    x, y, s, th = kps.T
    half = k * s / 2.0
    ext = half * (np.abs(np.cos(th)) + np.abs(np.sin(th)))
    return ((x - ext >= margin) & (x + ext <= width - 1 - margin)
            & (y - ext >= margin) & (y + ext <= height - 1 - margin))


def bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (xs, ys); pixel (r, c) sits at x=c, y=r. Clamps at the border."""
    h, w = image.shape
    img = np.asarray(image, dtype=np.float64)
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    ax = xs - x0
    ay = ys - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 + ax * (v01 - v00)
    bot = v10 + ax * (v11 - v10)
    return top + ay * (bot - top)


def crop_patch(image: np.ndarray, kp: Keypoint, g_size: int = GRID_SIZE, k: float = SUPPORT_K,
               image_id: Optional[int] = None) -> Patch:
    """Crop the k*sigma x k*sigma region of ``kp`` onto a G x G grid (raw intensities)."""
    if g_size < 8:
        raise ValidationError("g_size must be at least 8")
    if not kp.scale > 0:
        raise NonPositiveScale(f"keypoint scale {kp.scale} must be positive")
    h, w = image.shape
    if not support_inside(kp.as_array(), w, h, k)[0]:
        raise OutOfBounds(f"support of keypoint at ({kp.x:.2f}, {kp.y:.2f}) sigma {kp.scale:.3g} exits the image")
    xs, ys = source_coordinates(kp, g_size, k)
    return Patch(bilinear(image, xs, ys), (image_id, kp))


def crop_patches(image: np.ndarray, kps: np.ndarray, g_size: int = GRID_SIZE,
                 k: float = SUPPORT_K) -> np.ndarray:
    """Batched crop_patch over an (n, 4) keypoint array -> (n, G, G) float32."""
    kps = np.atleast_2d(np.asarray(kps, dtype=np.float64))
    if kps.shape[0] == 0:
        return np.zeros((0, g_size, g_size), np.float32)
    if np.any(kps[:, 2] <= 0):
        raise NonPositiveScale("keypoint scale must be positive")
    h, w = image.shape
    inside = support_inside(kps, w, h, k)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise OutOfBounds(f"support of keypoint {bad} exits the image")
    xs, ys = source_coordinates(kps, g_size, k)
    return bilinear(image, xs, ys).astype(np.float32)


def standardize(pixels: np.ndarray) -> np.ndarray:
    """Zero mean, unit standard deviation over the last two axes; constant patches -> 0."""
    p = np.asarray(pixels)
    dt = p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64
    p64 = p.astype(np.float64)
    mean = p64.mean(axis=(-2, -1), keepdims=True)
    std = p64.std(axis=(-2, -1), keepdims=True)
    return ((p64 - mean) / np.maximum(std, STD_EPS)).astype(dt)


@dataclass(frozen=True)
class AugmentParams:
    flip_p: float = 0.5
    rot90_p: float = 0.5
    brightness_range: float = 0.1
    contrast_range: float = 0.2

    def __post_init__(self):
        for name in ("flip_p", "rot90_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be a probability")
        if self.brightness_range < 0 or self.contrast_range < 0:
            raise ValidationError("augmentation ranges must be nonnegative")


NO_AUGMENT = AugmentParams(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentDraw:
    """One sampled augmentation: shared geometry, per-patch photometry."""

    flip: bool
    rot90: int  # number of quarter turns, 0 for none
    gains: Tuple[float, float]
    offsets: Tuple[float, float]


def sample_augmentation(seed, params: AugmentParams = AugmentParams()) -> AugmentDraw:
    """Draw an augmentation; ``seed`` may be an int or a key tuple such as (seed, step, set, index)."""
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < params.flip_p)
    rot = bool(rng.random() < params.rot90_p)
    k_rot = int(rng.integers(1, 4)) if rot else 0
    u = rng.uniform(-1.0, 1.0, size=4)
    gains = (1.0 + u[0] * params.contrast_range, 1.0 + u[1] * params.contrast_range)
    # brightness is a fraction of the 8-bit full scale
    offsets = (u[2] * params.brightness_range * 255.0, u[3] * params.brightness_range * 255.0)
    return AugmentDraw(flip, k_rot, gains, offsets)


def apply_augmentation(pair: Tuple[np.ndarray, np.ndarray], draw: AugmentDraw):
    out = []
    for p, gain, offset in zip(pair, draw.gains, draw.offsets):
        p = np.asarray(p)
        if draw.flip:
            p = p[..., ::-1]
        if draw.rot90:
            p = np.rot90(p, draw.rot90, axes=(-2, -1))
        if gain != 1.0 or offset != 0.0:
            mean = p.mean(axis=(-2, -1), keepdims=True)
            p = (mean + gain * (p - mean) + offset).astype(p.dtype)
        out.append(np.ascontiguousarray(p))
    return out[0], out[1]


def augment_pair(pair: Tuple[np.ndarray, np.ndarray], seed, params: AugmentParams = AugmentParams()):
    """Random flip / quarter-turn shared by both patches, independent brightness and contrast."""
    return apply_augmentation(pair, sample_augmentation(seed, params))
