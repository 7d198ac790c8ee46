"""Central finite-difference checks of the loss and network gradients."""

from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from . import net
from .batching import MatchSet, TrainingBatch
from .losses import LossParams, beta_for, geometric_loss, structured_loss, total_loss

H = 1e-5
HINGE_CLEARANCE = 1e-3


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = H) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    for i in np.ndindex(*x.shape):
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _clear_of_hinges(f1, f2, s_patch, params: LossParams) -> bool:
    s = f1 @ f2.T
    n = len(s)
    ld = (1 - params.alpha) * np.diag(s)
    off = ~np.eye(n, dtype=bool)
    slacks = np.concatenate([(s - ld[:, None])[off], (s - ld[None, :])[off], beta_for(s_patch, params.beta_tiers) - np.diag(s)])
    return bool(np.abs(slacks).min() > HINGE_CLEARANCE)


def random_match_set(rng: np.random.Generator, n1: int, dim: int, params: LossParams):
    """Features and patch similarities with every hinge at least HINGE_CLEARANCE from its kink."""
    while True:
        f1 = rng.standard_normal((n1, dim)) / np.sqrt(dim)
        f2 = f1 + 0.6 * rng.standard_normal((n1, dim)) / np.sqrt(dim)
        sp = rng.uniform(0.05, 1.0, n1)
        if _clear_of_hinges(f1, f2, sp, params):
            return f1, f2, sp


def check_losses(n_sets: int = 50, n1: int = 4, dim: int = 8, seed: int = 0,
                 params: LossParams = LossParams()) -> Dict[str, float]:
    """Worst relative error of dE1, dE2 and d(total loss) over ``n_sets`` random match sets."""
    rng = np.random.default_rng(seed)
    sets = [random_match_set(rng, n1, dim, params) for _ in range(n_sets)]
    worst = {"e1": 0.0, "e2": 0.0, "total": 0.0}
    for f1, f2, sp in sets:
        _, g1, g2 = structured_loss((f1, f2), params.alpha)
        n1_ = numeric_grad(lambda x: structured_loss((x, f2), params.alpha)[0], f1.copy())
        n2_ = numeric_grad(lambda x: structured_loss((f1, x), params.alpha)[0], f2.copy())
        worst["e1"] = max(worst["e1"], rel_error(g1, n1_), rel_error(g2, n2_))

        def e2(a, b):
            return geometric_loss(np.einsum("ij,ij->i", a, b), sp, params.beta_tiers)[0]

        _, gd = geometric_loss(np.einsum("ij,ij->i", f1, f2), sp, params.beta_tiers)
        worst["e2"] = max(worst["e2"], rel_error(gd[:, None] * f2, numeric_grad(lambda x: e2(x, f2), f1.copy())),
                          rel_error(gd[:, None] * f1, numeric_grad(lambda x: e2(f1, x), f2.copy())))
    # the batch objective over groups of sets
    for start in range(0, n_sets, 5):
        group = sets[start:start + 5]
        feats = [(a.copy(), b.copy()) for a, b, _ in group]
        sps = [s for _, _, s in group]
        _, grads, _ = total_loss(feats, sps, params)
        for k in range(len(group)):
            for side in (0, 1):
                def fn(x, k=k, side=side):
                    trial = [list(p) for p in feats]
                    trial[k][side] = x
                    return total_loss([tuple(p) for p in trial], sps, params)[0]
                worst["total"] = max(worst["total"], rel_error(grads[k][side], numeric_grad(fn, feats[k][side].copy())))
    return worst


def micro_batch(seed: int = 0, n1: int = 4) -> TrainingBatch:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n1, 8, 8))
    b = a + 2.0 * rng.standard_normal((n1, 8, 8))
    return TrainingBatch((MatchSet((0, 1), a, b, rng.uniform(0.05, 1.0, n1), np.arange(n1)),))


def check_micro_net(seed: int = 0, params: LossParams = LossParams()) -> float:
    """Worst relative error of the whole-network weight gradient on the 8x8 micro net."""
    p = net.params_for("micro", seed, dtype=np.float64)
    objective = net.Objective(loss=params)
    # a batch whose loss is zero would make the check vacuous; redraw until hinges are active
    for attempt in range(100):
        batch = micro_batch(seed * 1000 + attempt)
        loss, grads = net.weight_gradients(p, batch, objective)
        if loss > 0:
            break
    worst = 0.0
    for li in range(len(p.weights)):
        def fn(w, li=li):
            trial = p.copy()
            trial.weights[li] = w
            return net.training_loss(trial, batch, objective)
        worst = max(worst, rel_error(grads[li], numeric_grad(fn, p.weights[li].copy())))
    return worst
