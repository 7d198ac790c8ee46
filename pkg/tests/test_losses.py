import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofeat.errors import SizeMismatch, ValidationError
from geofeat.gradcheck import check_losses
from geofeat.losses import (LossParams, MatchSetFeatures, beta_for, geometric_loss, hardest_in_batch_loss,
                            match_set_loss, structured_loss, structured_loss_from_similarity, total_loss)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_identity_similarity_has_zero_e1():
    e = np.eye(2, 8)
    e1, g1, g2 = structured_loss(MatchSetFeatures(e, e.copy()), 0.4)
    assert e1 == 0.0 and not g1.any() and not g2.any()


def test_antidiagonal_similarity():
    e = np.eye(2, 8)
    e1, _, _ = structured_loss((e, e[::-1].copy()), 0.4)
    assert e1 == pytest.approx(2.0, abs=1e-9)


def test_shape_checks():
    with pytest.raises(SizeMismatch):
        structured_loss((np.eye(3, 8), np.eye(2, 8)), 0.4)
    with pytest.raises(SizeMismatch):
        MatchSetFeatures(np.eye(3, 8), np.eye(2, 8))
    with pytest.raises(ValidationError):
        structured_loss((np.eye(1, 8), np.eye(1, 8)), 0.4)


@pytest.mark.parametrize("s_patch,s_ii,expected", [(0.6, 0.9, 0.0), (0.1, 0.1, 0.1), (0.3, 0.2, 0.3)])
def test_geometric_loss_examples(s_patch, s_ii, expected):
    e2, _ = geometric_loss([s_ii], [s_patch])
    assert e2 == pytest.approx(expected, abs=1e-9)


def test_tier_boundaries():
    assert list(beta_for([0.5, 0.4999, 0.2, 0.1999, 1.0, 1e-6])) == [0.7, 0.5, 0.5, 0.2, 0.7, 0.2]
    _, g = geometric_loss([0.9, 0.1], [0.6, 0.6])
    assert list(g) == [0.0, -1.0]


def test_total_composition():
    e = np.eye(2, 8)
    anti = (e, e[::-1].copy())
    # both diagonal cosines are 0; a single 0.25 tier makes e2 = 0.5
    loss, _, per_set = total_loss([anti], [np.array([0.3, 0.6])], LossParams(lam=0.2, beta_tiers=((-np.inf, 0.25),)))
    assert loss == pytest.approx(2.1, abs=1e-9) and per_set == [loss]
    # default tiers: beta 0.5 twice
    _, e1, e2, _, _ = match_set_loss(*anti, [0.3, 0.3])
    assert (e1, e2) == (pytest.approx(2.0, abs=1e-9), pytest.approx(1.0, abs=1e-9))
    loss, _, _ = total_loss([anti, (e, e.copy())], [np.array([0.3, 0.3]), np.ones(2)])
    assert loss == pytest.approx((2.0 + 0.2 * 1.0) / 2, abs=1e-9)


def test_lambda_zero_is_mean_e1(rng):
    sets = [(unit_rows(rng, 5, 8), unit_rows(rng, 5, 8)) for _ in range(3)]
    sp = [rng.uniform(0.01, 1, 5) for _ in sets]
    loss, _, _ = total_loss(sets, sp, LossParams(lam=0.0))
    assert loss == pytest.approx(np.mean([structured_loss(s, 0.4)[0] for s in sets]), abs=1e-12)


def test_perfect_features_zero_loss():
    e = np.eye(4, 8)
    loss, grads, _ = total_loss([(e, e.copy())], [np.ones(4)])
    assert loss == 0.0 and all(not g.any() for pair in grads for g in pair)


def test_total_loss_errors():
    with pytest.raises(ValidationError):
        total_loss([], [])
    with pytest.raises(SizeMismatch):
        total_loss([(np.eye(2, 4), np.eye(2, 4))], [])


def test_params_validation():
    for kw in ({"alpha": 0.0}, {"alpha": 1.0}, {"lam": -0.1}, {"beta_tiers": ((0.0, 1.2),)}):
        with pytest.raises(ValidationError):
            LossParams(**kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_e1_properties(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (5, 5))
    e1, _ = structured_loss_from_similarity(s, 0.4)
    assert e1 >= 0
    perm = rng.permutation(5)
    assert structured_loss_from_similarity(s[perm][:, perm], 0.4)[0] == pytest.approx(e1, abs=1e-12)
    i, j = rng.choice(5, 2, replace=False)
    bumped = s.copy()
    bumped[i, j] += rng.uniform(0, 1)
    assert structured_loss_from_similarity(bumped, 0.4)[0] >= e1 - 1e-12
    l_diag = 0.6 * np.diag(s)
    off = ~np.eye(5, dtype=bool)
    clean = np.all((s <= np.minimum(l_diag[:, None], l_diag[None, :])) | ~off)
    assert (e1 == 0) == clean


def test_finite_difference_gradients():
    errs = check_losses(n_sets=50, n1=4, seed=0)
    assert max(errs.values()) < 1e-4


def test_hardest_in_batch_comparator(rng):
    f1 = unit_rows(rng, 6, 8)
    loss, g1, g2 = hardest_in_batch_loss(f1, f1.copy(), margin=0.6)
    # perfect positives: loss is the margin shortfall below the hardest negatives only
    d = np.sqrt(np.maximum(2 - 2 * f1 @ f1.T, 0) + 1e-8)
    np.fill_diagonal(d, np.inf)
    dneg = np.minimum(d.min(axis=1), d.min(axis=0))
    assert loss == pytest.approx(np.maximum(0, 0.6 + 1e-4 - dneg).mean(), abs=1e-6)
    # numeric check of one coordinate
    h = 1e-6
    f1p = f1.copy()
    f1p[0, 0] += h
    f1m = f1.copy()
    f1m[0, 0] -= h
    num = (hardest_in_batch_loss(f1p, f1, 0.6)[0] - hardest_in_batch_loss(f1m, f1, 0.6)[0]) / (2 * h)
    assert hardest_in_batch_loss(f1, f1, 0.6)[1][0, 0] == pytest.approx(num, abs=1e-5)
