import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fskd import autodiff as ad
from fskd.gradcheck import op_cases
from fskd.uncertainty import nll_precision, precision_from_factor, uc_loss


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).value, a)


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 0.0, 2.0])).value, [0, 0, 2])


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(np.zeros(4)).value, 0.25)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError) as e:
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(e.value)
    with pytest.raises(ad.ShapeError) as e:
        ad.add(np.ones((2, 3)), np.ones((4,)))
    assert "(2, 3)" in str(e.value) and "(4,)" in str(e.value)


def test_gather_cell_out_of_range():
    with pytest.raises((IndexError, ValueError)):
        ad.gather_cell(np.zeros((2, 4, 2)), np.array([0, 4]))


def test_backward_requires_scalar_root():
    x = ad.Var(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_sum_gradient_is_ones():
    x = ad.Var(np.arange(6.0).reshape(2, 3))
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_half_squared_norm_gradient():
    x = ad.Var(np.array([3.0, 4.0]))
    (ad.sum(x * x) * 0.5).backward()
    np.testing.assert_allclose(x.grad, [3.0, 4.0])


def test_shared_node_accumulates():
    x = ad.Var(np.array([2.0]))
    y = x * 3.0
    ad.sum(y + y * y).backward()  # d/dx (3x + 9x²) = 3 + 18x
    np.testing.assert_allclose(x.grad, [39.0])


def test_logdet_factor_gradient():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(2, 8))
    r = ad.grad_check(lambda v: ad.logdet(precision_from_factor(v, 1e-6)), q)
    assert r["max_rel_err"] < 1e-5


def test_grad_check_sum_exact():
    # a dyadic step on integer inputs keeps the differences free of round-off
    x = np.random.default_rng(1).integers(-50, 50, size=(3, 4)).astype(float)
    r = ad.grad_check(lambda v: ad.sum(v), x, step=2.0**-16)
    assert r["max_rel_err"] == 0.0


def test_grad_check_precision_loss_in_q():
    rng = np.random.default_rng(7)
    q, x, vs = rng.normal(size=(2, 8)), rng.normal(size=2), rng.normal(size=2)
    r = ad.grad_check(lambda v: nll_precision(x, vs, precision_from_factor(v, 1e-6)), q)
    assert r["max_rel_err"] < 1e-4


def test_grad_check_weighted_loss_in_offset():
    rng = np.random.default_rng(7)
    omega = precision_from_factor(rng.normal(size=(2, 8)), 1e-6).value
    vs = rng.normal(size=2)
    r = ad.grad_check(lambda v: uc_loss(v, vs, omega, np.array([0.4]), 1.0), rng.normal(size=2))
    assert r["max_rel_err"] < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    with pytest.raises(ValueError):
        ad.grad_check(lambda v: ad.sum(ad.log(v)), np.array([-1.0, 1.0]))


@pytest.mark.parametrize("seed", range(3))
def test_registered_ops(seed):
    for name, f, x in op_cases(np.random.default_rng(seed)):
        r = ad.grad_check(f, x)
        assert r["passed"], (name, r["max_rel_err"])


def test_deterministic_values_and_grads():
    def run():
        rng = np.random.default_rng(3)
        x = ad.Var(rng.normal(size=(4, 5)))
        w = rng.normal(size=(5, 3))
        ad.sum(ad.log_softmax(ad.matmul(x, w), -1)).backward()
        return x.grad

    assert np.array_equal(run(), run())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_reshape_is_row_major(x):
    np.testing.assert_array_equal(ad.reshape(x, (4, 3)).value, x.reshape(4, 3))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-20, 20)))
def test_softmax_sums_to_one(x):
    np.testing.assert_allclose(ad.softmax(x, -1).value.sum(-1), 1.0, atol=1e-12)
