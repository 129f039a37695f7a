import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trkp import autodiff as ad
from trkp.autodiff import ContractError, ShapeError, Tensor

from oracles import central_difference, relative_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def check_grad(build, arrays, tol=1e-6):
    leaves = [leaf(a) for a in arrays]
    grads = ad.backward(build(*leaves))
    fd = central_difference(lambda: float(build(*leaves).data), [t.data for t in leaves])
    for t, g in zip(leaves, fd):
        assert relative_error(grads[t], g) < tol


# -- forward examples -------------------------------------------------------


def test_matmul_shape():
    out = ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 1))))


def test_relu_values():
    assert ad.relu(leaf([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_add_zero_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(ad.add(leaf(x), leaf(np.zeros((3, 4)))).data, x)


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(leaf(np.ones(3)), leaf(np.ones(4)))


def test_scalar_broadcast():
    x = leaf([1.0, 2.0])
    g = ad.backward(ad.tensor_sum(x * 3.0))
    assert g[x].tolist() == [3.0, 3.0]


# -- backward examples ------------------------------------------------------


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ad.backward(ad.tensor_sum(x))[x], np.ones((2, 3)))


def test_square_gradient():
    x = leaf([1.0, 2.0])
    assert ad.backward(ad.tensor_sum(x * x))[x].tolist() == [2.0, 4.0]


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        ad.backward(leaf([1.0, 2.0]))


def test_fan_out_accumulates():
    x = leaf([3.0])
    y = x * 2.0 + x * 5.0
    assert ad.backward(ad.tensor_sum(y))[x].tolist() == [7.0]


def test_repeated_backward_identical():
    rng = np.random.default_rng(1)
    x, w, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=2))
    loss = ad.tensor_sum(ad.sigmoid(ad.affine(x, w, b)))
    g1 = {k: v.copy() for k, v in ad.backward(loss).items()}
    g2 = ad.backward(loss)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_seeded_vector_jacobian_product():
    x = leaf([1.0, 2.0, 3.0])
    g = ad.backward(x * x, grad=np.array([1.0, 0.0, 2.0]))
    assert g[x].tolist() == [2.0, 0.0, 12.0]


# -- gradient reversal ------------------------------------------------------


def test_grl_forward_identity():
    x = np.random.default_rng(2).normal(size=(2, 3)).astype(np.float32)
    assert ad.grl(Tensor(x), 0.01).data.tobytes() == x.tobytes()


def test_grl_backward_example():
    x = leaf([0.0, 0.0])
    g = ad.backward(ad.grl(x, 0.01), grad=np.array([1.0, -2.0]))
    assert np.allclose(g[x], [-0.01, 0.02], rtol=0, atol=1e-15)


def test_grl_mu_zero_blocks_gradient():
    x = leaf([1.0, -4.0])
    g = ad.backward(ad.tensor_sum(ad.grl(x, 0.0) * 3.0))
    assert np.all(g[x] == 0)


def test_grl_rejects_negative_mu():
    with pytest.raises(ValueError):
        ad.grl(leaf([1.0]), -0.1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.integers(0, 10_000))
def test_grl_scales_upstream(mu, seed):
    rng = np.random.default_rng(seed)
    x, w = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(2, 2)))
    plain = ad.backward(ad.tensor_sum(ad.sigmoid(ad.matmul(x, w))))[x].copy()
    rev = ad.backward(ad.tensor_sum(ad.sigmoid(ad.matmul(ad.grl(x, mu), w))))[x]
    assert np.array_equal(rev, plain * np.float64(-mu))


# -- finite differences per op ----------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_ops_fd(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    check_grad(lambda x, y: ad.tensor_sum(ad.sigmoid(x * y - x) + ad.relu(x + y)), [a, b])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_and_mean_fd(seed):
    rng = np.random.default_rng(seed)
    a, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    check_grad(lambda x, c: ad.tensor_sum(ad.tensor_mean(ad.softmax(x) * c, axis=1) * ad.tensor_sum(c)),
               [a, w])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.sampled_from([0, 1, 2]))
def test_conv2d_fd(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    check_grad(lambda x, w, b: ad.tensor_sum(ad.sigmoid(ad.conv2d(x, w, b, stride, pad))), [x, w, b])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_affine_reshape_take_fd(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)

    def f(x, w, b):
        y = ad.affine(x, w, b)
        return ad.tensor_sum(ad.reshape(y, (6, 5))[1:4] * y[0, 0:3])

    check_grad(f, [x, w, b])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.floats(0.0, 3.0))
def test_focal_losses_fd(seed, alpha, gamma):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=2.0, size=(3, 4))
    t = rng.integers(0, 2, size=(3, 4))
    check_grad(lambda x: ad.tensor_sum(ad.sigmoid_focal(x, t, alpha, gamma)), [z])
    zc = rng.normal(scale=2.0, size=(3, 4, 3))
    lab = rng.integers(0, 3, size=(3, 4))
    check_grad(lambda x: ad.tensor_sum(ad.softmax_focal(x, lab, alpha, gamma)), [zc])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 2.0))
def test_smooth_l1_fd(seed, delta):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(scale=2.0, size=(4, 4)), rng.normal(size=(4, 4))
    # keep away from the kink where finite differences are undefined
    d = p - t
    p = np.where(np.abs(np.abs(d) - delta) < 1e-3, p + 0.01, p)
    check_grad(lambda x: ad.tensor_sum(ad.smooth_l1(x, t, delta)), [p])


def test_f32_fd_tolerance():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4, 4, 1)).astype(np.float32))
    w = Tensor(rng.normal(size=(3, 3, 1, 2)).astype(np.float32))
    b = Tensor(np.zeros(2, np.float32))
    f = lambda: ad.tensor_sum(ad.sigmoid(ad.conv2d(x, w, b, 1, 1)))
    g = ad.backward(f())
    # oracle at the same point in f64: an f32 difference quotient carries ~1e-3 roundoff itself
    x64, w64, b64 = (Tensor(t.data.astype(np.float64)) for t in (x, w, b))
    f64 = lambda: float(ad.tensor_sum(ad.sigmoid(ad.conv2d(x64, w64, b64, 1, 1))).data)
    fd = central_difference(f64, [w64.data], eps=1e-3)
    assert g[w].dtype == np.float32
    assert relative_error(g[w], fd[0]) < 1e-3


# -- loss values ------------------------------------------------------------


def test_focal_value_at_half():
    out = ad.sigmoid_focal(leaf([0.0]), np.array([1]), 0.25, 2.0)
    assert out.data[0] == pytest.approx(-0.25 * 0.25 * np.log(0.5), abs=1e-12)
    assert out.data[0] == pytest.approx(0.04332, abs=1e-5)


def test_smooth_l1_value():
    out = ad.smooth_l1(leaf([0.5]), np.array([0.0]), 1.0)
    assert out.data[0] == pytest.approx(0.125)


def test_default_dtype_is_f32():
    assert Tensor([1, 2]).dtype == np.float32
    assert ad.resolve_dtype("f64") == np.float64
    with pytest.raises(ValueError):
        ad.resolve_dtype("f16")


def test_deepcopy_makes_new_leaf():
    import copy

    x = leaf([1.0])
    y = copy.deepcopy(x)
    assert y.id != x.id and np.array_equal(y.data, x.data)
    with pytest.raises(ContractError):
        copy.deepcopy(x * 2.0)
