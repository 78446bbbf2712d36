import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fskd import tps


def _random_corr(rng, n, spread=90.0, noise=4.0):
    p = rng.uniform(0, spread, size=(n, 2))
    return tps.Correspondences(p, p + rng.normal(0, noise, size=(n, 2)), rng.uniform(0.5, 5, n))


def test_identity_warp_parameters():
    p = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 5.0]])
    t = tps.solve_tps(tps.Correspondences(p, p, None), 0.0)
    np.testing.assert_allclose(t.rbf_weights, 0, atol=1e-10)
    np.testing.assert_allclose(t.affine, [[0, 1, 0], [0, 0, 1]], atol=1e-10)
    q = np.array([[3.3, 7.1], [-4.0, 20.0]])
    np.testing.assert_allclose(t(q), q, atol=1e-9)


def test_translation_is_affine():
    p = np.random.default_rng(0).uniform(0, 50, size=(6, 2))
    t = tps.solve_tps(tps.Correspondences(p, p + (10, -5), None), 1.0)
    np.testing.assert_allclose(t.rbf_weights, 0, atol=1e-10)
    np.testing.assert_allclose(t.affine, [[10, 1, 0], [-5, 0, 1]], atol=1e-10)
    np.testing.assert_allclose(t(np.array([1.0, 2.0])), [11, -3], atol=1e-10)


def test_exact_interpolation_at_zero_lambda():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = _random_corr(rng, int(rng.integers(4, 13)))
        t = tps.solve_tps(c, 0.0)
        assert np.abs(t(c.src) - c.dst).max() < 1e-8


def test_side_conditions():
    rng = np.random.default_rng(1)
    for lam in (0.0, 0.1, 1.0, 10.0):
        t = tps.solve_tps(_random_corr(rng, 9), lam)
        ones, bp = t.side_conditions()
        assert np.abs(ones).max() < 1e-8 and np.abs(bp).max() < 1e-8


def test_uniform_uncertainty_equals_scaled_penalty():
    rng = np.random.default_rng(2)
    c = _random_corr(rng, 8)
    for scale in (0.5, 2.0, 7.0):
        lam = 0.3
        a = tps.solve_tps(tps.Correspondences(c.src, c.dst, np.full(8, scale)), lam)
        b = tps.solve_tps(tps.Correspondences(c.src, c.dst, np.ones(8)), lam * scale**2)
        np.testing.assert_allclose(a.params, b.params, atol=1e-8, rtol=0)


def test_high_uncertainty_landmark_slips_most():
    p = np.array([[10.0, 50.0], [40.0, 20.0], [40.0, 80.0], [70.0, 35.0], [70.0, 65.0], [90.0, 50.0]])
    dst = p.copy()
    dst[0] += (12.0, -6.0)  # the uncertain landmark is also the one that disagrees
    dst[1:] += np.random.default_rng(0).normal(0, 1.0, size=(5, 2))
    j = np.ones(6)
    j[0] = 100.0
    c = tps.Correspondences(p, dst, j)
    t = tps.solve_tps(c, 1.0)
    res = np.linalg.norm(dst - t(p), axis=1)
    assert np.all(res[0] > res[1:])


def test_translation_equivariance():
    rng = np.random.default_rng(3)
    c = _random_corr(rng, 7)
    shift = np.array([13.0, -4.0])
    t1 = tps.solve_tps(c, 1.0)
    t2 = tps.solve_tps(tps.Correspondences(c.src + shift, c.dst + shift, c.strength), 1.0)
    q = rng.uniform(0, 90, size=(5, 2))
    np.testing.assert_allclose(t2(q + shift), t1(q) + shift, atol=1e-8)


def test_objective_identity_is_zero():
    p = np.random.default_rng(4).uniform(0, 50, size=(5, 2))
    c = tps.Correspondences(p, p, None)
    assert tps.tps_objective(c, tps.solve_tps(c, 1.0), 1.0) == pytest.approx(0, abs=1e-12)


def test_objective_minimised_by_solution():
    rng = np.random.default_rng(5)
    c = _random_corr(rng, 8)
    lam = 2.0
    t = tps.solve_tps(c, lam)
    best = tps.tps_objective(c, t, lam)
    for _ in range(20):
        # perturb inside the side-condition space by re-solving from perturbed targets
        c2 = tps.Correspondences(c.src, c.dst + rng.normal(0, 0.5, size=c.dst.shape), c.strength)
        assert tps.tps_objective(c, tps.solve_tps(c2, lam), lam) >= best - 1e-9


def test_zero_strength_is_hard_constraint():
    rng = np.random.default_rng(6)
    c = _random_corr(rng, 6)
    c.strength[2] = 0.0
    t = tps.solve_tps(c, 5.0)
    assert np.linalg.norm(t(c.src[2]) - c.dst[2]) < 1e-8
    assert np.isfinite(tps.tps_objective(c, t, 5.0))


def test_errors():
    p = np.array([[0.0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(tps.TpsError, match="collinear"):
        tps.solve_tps(tps.Correspondences(p, p, None), 0.0)
    dup = np.array([[0.0, 0], [1, 0], [0, 1], [1, 0]])
    with pytest.raises(tps.TpsError, match="duplicate"):
        tps.solve_tps(tps.Correspondences(dup, dup, None), 0.0)
    with pytest.raises(tps.TpsError):
        tps.Correspondences(p[:2], p[:2], None)
    with pytest.raises(tps.TpsError):
        tps.solve_tps(tps.Correspondences(p + [[0, 0], [0, 1], [0, 0], [1, 0]], p, None), -1.0)


def test_json_roundtrip():
    c = _random_corr(np.random.default_rng(7), 5)
    back, lam = tps.Correspondences.from_json(c.to_json(0.5))
    assert lam == 0.5
    np.testing.assert_array_equal(back.src, c.src)
    np.testing.assert_array_equal(back.dst, c.dst)
    np.testing.assert_array_equal(back.strength, c.strength)
    doc = json.loads(c.to_json(1.0))
    doc["P'"] = doc.pop("P_prime")
    again, _ = tps.Correspondences.from_json(json.dumps(doc))
    np.testing.assert_array_equal(again.dst, c.dst)


def test_identity_image_warp_is_exact():
    img = np.random.default_rng(8).integers(0, 256, size=(40, 50, 3), dtype=np.uint8)
    p = np.array([[0.0, 0.0], [49.0, 0.0], [0.0, 39.0], [49.0, 39.0], [20.0, 17.0]])
    t = tps.solve_tps(tps.Correspondences(p, p, None), 1.0)
    assert np.array_equal(tps.warp_image(img, t), img)


def test_integer_translation_shifts_with_pad():
    img = np.random.default_rng(9).integers(1, 256, size=(30, 30), dtype=np.uint8)
    p = np.array([[0.0, 0.0], [29.0, 0.0], [0.0, 29.0], [29.0, 29.0]])
    # output pixel x samples source x + (3, 2)
    t = tps.solve_tps(tps.Correspondences(p, p + (3, 2), None), 0.0)
    out = tps.warp_image(img, t, pad=0)
    assert np.array_equal(out[:-2, :-3], img[2:, 3:])
    assert np.all(out[-2:, :] == 0) and np.all(out[:, -3:] == 0)


def test_large_lambda_approaches_affine_fit():
    rng = np.random.default_rng(10)
    c = tps.Correspondences(rng.uniform(0, 60, (10, 2)), rng.uniform(0, 60, (10, 2)), None)
    a = tps.fit_affine(c)
    t = tps.solve_tps(c, 1e9)
    np.testing.assert_allclose(t.affine, a, rtol=1e-4, atol=1e-6)
    board = ((np.indices((60, 60)).sum(0) // 6) % 2 * 255).astype(np.uint8)
    ys, xs = np.mgrid[0:60, 0:60]
    grid = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
    src = grid @ a[:, 1:].T + a[:, 0]
    ref = tps.remap_bilinear(board, src[:, 0], src[:, 1]).reshape(60, 60)
    assert np.mean(tps.warp_image(board, t) != ref) < 0.01


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 5))
def test_side_conditions_property(seed, lam):
    c = _random_corr(np.random.default_rng(seed), 6)
    ones, bp = tps.solve_tps(c, lam).side_conditions()
    assert np.abs(ones).max() < 1e-7 and np.abs(bp).max() < 1e-6
