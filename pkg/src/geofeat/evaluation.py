"""Descriptor matching, matching metrics, ratio calibration, Compact-Dim and quantisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import DegenerateCovariance, EmptySet, NoGroundTruth, OutOfRange, ValidationError


@dataclass(frozen=True)
class DescriptorSet:
    image_id: int
    keypoints: np.ndarray  # (n, 4): x, y, sigma, theta
    vectors: np.ndarray  # (n, d) float32 unit rows, or uint8 quantised

    def __post_init__(self):
        kps = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        object.__setattr__(self, "keypoints", kps)
        if len(kps) != len(self.vectors):
            raise ValidationError("keypoint count differs from vector count")
        if self.vectors.dtype != np.uint8 and len(self.vectors):
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise ValidationError("float descriptors must have unit-norm rows")

    @property
    def quantized(self) -> bool:
        return self.vectors.dtype == np.uint8

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True)
class MatchResult:
    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray
    mutual_checked: bool
    ratio_threshold: Optional[float]

    def __len__(self):
        return len(self.index_a)

    def pairs(self) -> Set[Tuple[int, int]]:
        return set(zip(self.index_a.tolist(), self.index_b.tolist()))


def _as_vectors(x) -> np.ndarray:
    v = x.vectors if isinstance(x, DescriptorSet) else np.asarray(x)
    return v.astype(np.float64) if v.dtype == np.uint8 else v


def distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def two_nearest(d: np.ndarray):
    """Nearest index (lowest index on ties), its distance, and the second-nearest distance per row."""
    nn = d.argmin(axis=1)
    rows = np.arange(d.shape[0])
    d1 = d[rows, nn]
    if d.shape[1] > 1:
        masked = d.copy()
        masked[rows, nn] = np.inf
        d2 = masked.min(axis=1)
    else:
        d2 = np.full(d.shape[0], np.inf)
    return nn, d1, d2


def _ratio(d1, d2):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(d2 > 0, d1 / d2, 1.0)
    return np.where(np.isfinite(d2), r, 0.0)


def match_descriptors(a, b, mutual: bool = True, ratio: Optional[float] = None) -> MatchResult:
    """Exhaustive nearest-neighbour matching with optional mutual check and ratio test."""
    va, vb = _as_vectors(a), _as_vectors(b)
    if len(va) == 0 or len(vb) == 0:
        raise EmptySet("both descriptor sets must be nonempty")
    if ratio is not None and not 0.0 < ratio <= 1.0:
        raise ValidationError("ratio must lie in (0, 1]")
    d = distance_matrix(va, vb)
    nn_ab, d1, d2 = two_nearest(d)
    r = _ratio(d1, d2)
    keep = np.ones(len(va), dtype=bool)
    if mutual:
        nn_ba = d.argmin(axis=0)
        keep &= nn_ba[nn_ab] == np.arange(len(va))
    if ratio is not None:
        keep &= r < ratio
    ia = np.flatnonzero(keep)
    return MatchResult(ia, nn_ab[ia], d1[ia], r[ia], mutual, ratio)


def ratio_candidates(a, b, correct) -> np.ndarray:
    """(d1, d2, is_inlier) for every query of ``a``; ``correct(i, j)`` judges a match."""
    d = distance_matrix(_as_vectors(a), _as_vectors(b))
    nn, d1, d2 = two_nearest(d)
    ok = np.array([bool(correct(i, int(j))) for i, j in enumerate(nn)])
    return np.column_stack([d1, d2, ok.astype(np.float64)])


# --- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruth:
    """Acceptable (index_a, index_b) correspondences."""

    pairs: frozenset

    @classmethod
    def from_projection(cls, projected_in_b: np.ndarray, keypoints_b: np.ndarray, tol_px: float = 3.0):
        """a-feature i truly matches b-feature j when j lies within ``tol_px`` of i's projection into b.

        ``projected_in_b`` is (n_a, 2) with NaN rows for features not visible in b.
        """
        proj = np.asarray(projected_in_b, dtype=np.float64)
        kb = np.asarray(keypoints_b, dtype=np.float64)[:, :2]
        pairs = set()
        for i, p in enumerate(proj):
            if not np.all(np.isfinite(p)):
                continue
            close = np.flatnonzero(((kb - p) ** 2).sum(1) <= tol_px * tol_px)
            pairs.update((i, int(j)) for j in close)
        return cls(frozenset(pairs))

    @property
    def n_true(self) -> int:
        """Number of a-features that have at least one true partner."""
        return len({i for i, _ in self.pairs})

    def __contains__(self, item):
        return item in self.pairs


def matching_metrics(result: MatchResult, ground_truth, n_features: int) -> dict:
    """Matching score, recall and precision; precision is 0 when nothing was matched."""
    if n_features <= 0:
        raise ValidationError("n_features must be positive")
    gt = ground_truth if isinstance(ground_truth, GroundTruth) else GroundTruth(frozenset(ground_truth))
    if gt.n_true == 0:
        raise NoGroundTruth("ground truth is empty; recall is undefined")
    inliers = sum(1 for p in zip(result.index_a.tolist(), result.index_b.tolist()) if p in gt.pairs)
    putative = len(result)
    return {
        "matching_score": inliers / n_features,
        "recall": inliers / gt.n_true,
        "precision": inliers / putative if putative else 0.0,
        "inliers": inliers,
        "putative": putative,
        "true_matches": gt.n_true,
    }


# --- ratio calibration ------------------------------------------------------

@dataclass(frozen=True)
class RatioCalibration:
    ratio: float
    precision: float
    n_kept: int
    qualified: bool  # False when no grid ratio reaches the target (ratio is then the grid minimum)


def ratio_grid(grid_step: float) -> np.ndarray:
    n = int(round(1.0 / grid_step))
    return np.round(np.arange(1, n + 1) * grid_step, 12)


def precision_at(candidates: np.ndarray, r: float) -> Tuple[float, int]:
    c = np.asarray(candidates, dtype=np.float64)
    kept = _ratio(c[:, 0], c[:, 1]) < r
    n = int(kept.sum())
    return (float(c[kept, 2].sum()) / n if n else 0.0), n


def calibrate_ratio(candidates, target_precision: float, grid_step: float = 0.01) -> RatioCalibration:
    """Largest grid ratio whose kept candidates reach ``target_precision``."""
    c = np.asarray(candidates, dtype=np.float64).reshape(-1, 3)
    if len(c) == 0:
        raise EmptySet("no ratio candidates")
    if not 0.0 < target_precision < 1.0:
        raise ValidationError("target precision must lie in (0, 1)")
    if not 0.0 < grid_step <= 0.01:
        raise ValidationError("grid_step must lie in (0, 0.01]")
    grid = ratio_grid(grid_step)
    ratios = _ratio(c[:, 0], c[:, 1])
    order = np.argsort(ratios, kind="stable")
    sorted_r = ratios[order]
    cum_in = np.concatenate([[0.0], np.cumsum(c[order, 2])])
    n_kept = np.searchsorted(sorted_r, grid, side="left")  # count of ratio < r
    prec = np.where(n_kept > 0, cum_in[n_kept] / np.maximum(n_kept, 1), 0.0)
    ok = np.flatnonzero(prec >= target_precision)
    if len(ok) == 0:
        return RatioCalibration(float(grid[0]), float(prec[0]), int(n_kept[0]), False)
    k = ok[-1]
    return RatioCalibration(float(grid[k]), float(prec[k]), int(n_kept[k]), True)


# --- compactness ------------------------------------------------------------

def explained_variances(features: np.ndarray) -> np.ndarray:
    """PCA explained variances sorted in decreasing order."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0)
    cov = x.T @ x / max(len(x) - 1, 1)
    return np.sort(np.clip(np.linalg.eigvalsh(cov), 0.0, None))[::-1]


def compact_dim(features: np.ndarray, t: float = 0.9) -> int:
    """Minimal k whose top-k explained variances carry at least a fraction ``t`` of the total."""
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] <= x.shape[1]:
        raise ValidationError("compact_dim needs an N x D matrix with N > D")
    if not 0.0 < t < 1.0:
        raise ValidationError("t must lie in (0, 1)")
    v = explained_variances(x)
    total = v.sum()
    if not total > 0:
        raise DegenerateCovariance("total variance is zero")
    frac = np.cumsum(v) / total
    # relative slack absorbs eigen-solver round-off on exactly representable spectra
    return int(np.argmax(frac >= t - 1e-12) + 1)


# --- quantisation -----------------------------------------------------------

def quantize(features: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly to [0, 255], rounding half away from zero."""
    v = np.asarray(features, dtype=np.float64)
    if np.any(np.abs(v) > 1.0 + 1e-6):
        raise OutOfRange("feature entries must lie in [-1, 1]")
    scaled = (np.clip(v, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    q = np.floor(scaled + 0.5)  # scaled >= 0, so this rounds half away from zero
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(q, dtype=np.float64) / 255.0 - 1.0).astype(np.float32)


def nn_agreement(queries: np.ndarray, database: np.ndarray, queries_q: np.ndarray, database_q: np.ndarray,
                 chunk: int = 1000) -> float:
    """Fraction of queries whose nearest database entry is the same in float and quantised form."""
    same = 0
    for s in range(0, len(queries), chunk):
        nf = distance_matrix(queries[s:s + chunk], database).argmin(axis=1)
        nq = distance_matrix(queries_q[s:s + chunk].astype(np.float64),
                             database_q.astype(np.float64)).argmin(axis=1)
        same += int((nf == nq).sum())
    return same / len(queries)
