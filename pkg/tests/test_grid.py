import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fskd.grid import ScalePrediction, decode_grid, encode_grid, encode_grid_batch, fuse_predictions, pck


def test_encode_cell_centre():
    c = encode_grid((24, 24), 8, 384)
    assert c.label == 0 and c.offset == (0.0, 0.0)


def test_encode_worked_example():
    c = encode_grid((100, 200), 8, 384)
    assert c.label == 34 and c.cell == (2, 4)
    assert c.offset == (-5 / 6, -2 / 3)


def test_encode_far_edge_clamps():
    c = encode_grid((384, 384), 8, 384)
    assert c.cell == (7, 7) and c.label == 63 and c.offset == (1.0, 1.0)


def test_encode_rejects_non_finite():
    with pytest.raises(ValueError):
        encode_grid((np.nan, 1.0), 8, 384)


def test_decode_examples():
    np.testing.assert_array_equal(decode_grid((0, 0), (0, 0), 8, 384), (24, 24))
    np.testing.assert_allclose(decode_grid((2, 4), (-5 / 6, -2 / 3), 8, 384), (100, 200), atol=1e-12)
    np.testing.assert_allclose(decode_grid((3, 6), (-0.75, -0.5), 12, 384), (100, 200), atol=1e-12)


def test_decode_rejects_bad_cell():
    with pytest.raises(ValueError):
        decode_grid((8, 0), (0, 0), 8, 384)


def test_batch_matches_scalar():
    pts = np.random.default_rng(0).uniform(0, 384, size=(50, 2))
    labels, v = encode_grid_batch(pts, 8, 384)
    for p, lab, off in zip(pts, labels, v):
        c = encode_grid(p, 8, 384)
        assert c.label == lab and np.array_equal(c.offset, off)


def _pred(u, s, l0=384):
    c = encode_grid(u, s, l0)
    return ScalePrediction(s, c.cell, c.offset)


def test_fusion_examples():
    p = _pred((100, 200), 8)
    assert np.array_equal(fuse_predictions([p], 384), decode_grid(p.cell, p.offset, 8, 384))
    np.testing.assert_allclose(fuse_predictions([p, _pred((100, 200), 12)], 384), (100, 200), atol=1e-12)
    a, b = _pred((90, 190), 8), _pred((110, 210), 8)
    np.testing.assert_allclose(fuse_predictions([a, b], 384), (100, 200), atol=1e-12)
    with pytest.raises(ValueError):
        fuse_predictions([], 384)


def test_pck_examples():
    gt = np.array([[50.0, 50.0]])
    assert pck(gt, gt, [True], (100, 200)) == 1.0
    assert pck(gt + [19.9, 0], gt, [True], (100, 200)) == 1.0
    assert pck(gt + [20.0, 0], gt, [True], (100, 200)) == 0.0
    gts = np.zeros((3, 2))
    preds = np.array([[5.0, 0], [25.0, 0], [0, 10.0]])
    assert pck(preds, gts, [True] * 3, (100, 200)) == pytest.approx(2 / 3)


def test_pck_absent_without_visible():
    assert pck(np.zeros((2, 2)), np.zeros((2, 2)), [False, False], (10, 10)) is None


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 383.999), st.floats(0, 383.999), st.sampled_from([4, 6, 8, 12, 16]))
def test_roundtrip_interior(x, y, s):
    c = encode_grid((x, y), s, 384)
    assert 0 <= c.cell[0] < s and 0 <= c.cell[1] < s
    assert max(abs(c.offset[0]), abs(c.offset[1])) <= 1
    np.testing.assert_allclose(decode_grid(c.cell, c.offset, s, 384), (x, y), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(-100, 500), st.floats(-100, 500))
def test_offsets_always_bounded(x, y):
    c = encode_grid((x, y), 8, 384)
    assert max(abs(c.offset[0]), abs(c.offset[1])) <= 1
