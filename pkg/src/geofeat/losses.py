"""Structured (mutual ratio-margin) loss, geometric loss and their gradients.

All gradients here are with respect to the row-normalised feature matrices
fed in; chaining through the L2 normalisation of the network output happens
in :mod:`geofeat.net`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import SizeMismatch, ValidationError


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.4
    lam: float = 0.2
    # (lower bound on s_patch, margin beta), checked top-down; the last tier catches the rest
    beta_tiers: Tuple[Tuple[float, float], ...] = ((0.5, 0.7), (0.2, 0.5), (-np.inf, 0.2))

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.lam < 0:
            raise ValidationError("lambda must be nonnegative")
        for _, beta in self.beta_tiers:
            if not 0.0 < beta < 1.0:
                raise ValidationError("tier margins must lie in (0, 1)")


@dataclass(frozen=True)
class MatchSetFeatures:
    f1: np.ndarray
    f2: np.ndarray

    def __post_init__(self):
        if self.f1.shape != self.f2.shape:
            raise SizeMismatch(f"feature shapes differ: {self.f1.shape} vs {self.f2.shape}")


def _check_pair(f1, f2):
    f1 = np.asarray(f1)
    f2 = np.asarray(f2)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise SizeMismatch(f"feature shapes differ or are not 2-D: {f1.shape} vs {f2.shape}")
    if f1.shape[0] < 2:
        raise ValidationError("a match set needs at least two pairs")
    return f1, f2


def structured_loss_from_similarity(s: np.ndarray, alpha: float):
    """E1 and dE1/dS for a square cosine-similarity matrix."""
    n = s.shape[0]
    z = 1.0 / (n * (n - 1))
    diag = np.diag(s)
    l_diag = (1.0 - alpha) * diag
    off = ~np.eye(n, dtype=bool)
    row_slack = (s - l_diag[:, None])  # l_ij - l_ii
    col_slack = (s - l_diag[None, :])  # l_ij - l_jj
    a = (row_slack > 0) & off
    b = (col_slack > 0) & off
    e1 = z * (np.where(a, row_slack, 0.0).sum() + np.where(b, col_slack, 0.0).sum())
    g = z * (a.astype(s.dtype) + b.astype(s.dtype))
    # diagonal entries enter every active hinge of their row (a) and column (b) with weight -(1 - alpha)
    g[np.diag_indices(n)] = -z * (1.0 - alpha) * (a.sum(axis=1) + b.sum(axis=0))
    return float(e1), g


def structured_loss(feats, alpha: float = 0.4):
    """E1 over one match set; returns (e1, grad_f1, grad_f2)."""
    f1, f2 = _check_pair(*((feats.f1, feats.f2) if isinstance(feats, MatchSetFeatures) else feats))
    s = f1 @ f2.T
    e1, g = structured_loss_from_similarity(s, alpha)
    return e1, g @ f2, g.T @ f1


def beta_for(s_patch, tiers=LossParams().beta_tiers) -> np.ndarray:
    s_patch = np.asarray(s_patch, dtype=np.float64)
    beta = np.full(s_patch.shape, np.nan)
    for lower, margin in tiers:
        beta = np.where(np.isnan(beta) & (s_patch >= lower), margin, beta)
    return beta


def geometric_loss(diag_sims, s_patch, tiers=LossParams().beta_tiers):
    """E2 = sum_i max(0, beta_i - s_ii) with beta tiered by patch similarity."""
    d = np.asarray(diag_sims, dtype=np.float64)
    beta = beta_for(s_patch, tiers)
    slack = beta - d
    active = slack > 0
    return float(np.where(active, slack, 0.0).sum()), np.where(active, -1.0, 0.0)


def match_set_loss(f1, f2, s_patch, params: LossParams = LossParams()):
    """e1 + lambda * e2 for one match set with gradients w.r.t. f1, f2."""
    f1, f2 = _check_pair(f1, f2)
    s = f1 @ f2.T
    e1, g = structured_loss_from_similarity(s, params.alpha)
    e2, g_diag = geometric_loss(np.diag(s), s_patch, params.beta_tiers)
    g[np.diag_indices(len(s))] += params.lam * g_diag
    return e1 + params.lam * e2, e1, e2, g @ f2, g.T @ f1


def total_loss(batch_feats: Sequence, batch_s_patch: Sequence, params: LossParams = LossParams()):
    """Mean of (e1 + lambda e2) over match sets.

    Returns (loss, grads, per_set) where grads is a list of (grad_f1, grad_f2)
    and per_set holds the per-match-set loss values in input order.
    """
    if len(batch_feats) == 0:
        raise ValidationError("empty batch")
    if len(batch_feats) != len(batch_s_patch):
        raise SizeMismatch("one s_patch vector per match set is required")
    m = len(batch_feats)
    total = 0.0
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    per_set = []
    for feats, sp in zip(batch_feats, batch_s_patch):
        f1, f2 = (feats.f1, feats.f2) if isinstance(feats, MatchSetFeatures) else feats
        val, _, _, g1, g2 = match_set_loss(f1, f2, sp, params)
        per_set.append(val)
        total += val
        grads.append((g1 / m, g2 / m))
    return total / m, grads, per_set


def hardest_in_batch_loss(f1, f2, margin: float = 1.0, eps: float = 1e-8):
    """Fixed-margin triplet loss on the hardest in-batch negative of each pair.

    Comparator only: d = ||a - p|| computed from cosine similarity on unit rows,
    negatives are the closest non-matching entry in the row or the column.
    Returns (loss, grad_f1, grad_f2).
    """
    f1, f2 = _check_pair(f1, f2)
    n = f1.shape[0]
    s = f1 @ f2.T
    d = np.sqrt(np.maximum(2.0 - 2.0 * s, 0.0) + eps)
    big = d + 10.0 * np.eye(n)
    j_row = big.argmin(axis=1)  # hardest p_j for anchor a_i
    i_col = big.argmin(axis=0)  # hardest a_k for positive p_i
    idx = np.arange(n)
    d_row = big[idx, j_row]
    d_col = big[i_col, idx]
    use_row = d_row <= d_col
    d_neg = np.where(use_row, d_row, d_col)
    d_pos = d[idx, idx]
    slack = margin + d_pos - d_neg
    active = slack > 0
    loss = float(np.where(active, slack, 0.0).mean())
    gd = np.zeros_like(s)
    w = active / n
    gd[idx, idx] += w
    np.add.at(gd, (idx[use_row], j_row[use_row]), -w[use_row])
    np.add.at(gd, (i_col[~use_row], idx[~use_row]), -w[~use_row])
    gs = gd * (-1.0 / d)  # dd/ds = -1/d
    return loss, gs @ f2, gs.T @ f1
