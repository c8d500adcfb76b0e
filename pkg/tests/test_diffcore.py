import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalegate import diffcore as dc
from scalegate.diffcore import Tensor, grad_check
from scalegate.errors import ContractError, DimensionError, DomainError


def leaf(a, name=None):
    return Tensor(np.array(a, dtype=float), requires_grad=True, name=name)


def fd_grad(f, x, eps=1e-6):
    """Central differences of scalar f over every entry of x (modified in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


# --- matmul -------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = dc.matmul(dc.constant(np.eye(2)), dc.constant(m))
    assert np.array_equal(out.data, m)


def test_matmul_hand():
    out = dc.matmul(dc.constant([[1.0, 2.0]]), dc.constant([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 2)))
    w = rng.uniform(-2, 2, (3, 2))
    loss = lambda: dc.mean(dc.mul(dc.matmul(a, b), dc.constant(w)))
    loss().backward()
    for t in (a, b):
        num = fd_grad(lambda: loss().item(), t.data)
        assert rel_err(t.grad, num) < 1e-6


def test_matmul_vector_forms():
    rng = np.random.default_rng(1)
    m, v = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
    loss = lambda: dc.mean(dc.matmul(m, v))
    loss().backward()
    assert rel_err(v.grad, fd_grad(lambda: loss().item(), v.data)) < 1e-7
    assert rel_err(m.grad, fd_grad(lambda: loss().item(), m.data)) < 1e-7


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(dc.constant(np.ones((2, 3))), dc.constant(np.ones((2, 3))))


# --- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_input_is_zero():
    out = dc.layer_norm(dc.constant([3.0, 3.0, 3.0]), dc.constant(np.ones(3)), dc.constant(np.zeros(3)))
    assert np.all(out.data == 0.0)


def test_layer_norm_two_point():
    out = dc.layer_norm(dc.constant([1.0, -1.0]), dc.constant(np.ones(2)), dc.constant(np.zeros(2)))
    # 1/sqrt(1 + 1e-5)
    assert out.data == pytest.approx([0.9999950000374997, -0.9999950000374997], abs=1e-15)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x = leaf(rng.uniform(-2, 2, (3, 5)))
    g, b = leaf(rng.uniform(0.5, 2, 5)), leaf(rng.uniform(-1, 1, 5))
    w = rng.normal(size=(3, 5))
    loss = lambda: dc.mean(dc.mul(dc.layer_norm(x, g, b), dc.constant(w)))
    loss().backward()
    for t in (x, g, b):
        assert rel_err(t.grad, fd_grad(lambda: loss().item(), t.data)) < 1e-5


def test_layer_norm_degenerate():
    with pytest.raises(DomainError):
        dc.layer_norm(dc.constant([1.0]), dc.constant([1.0]), dc.constant([0.0]))


# --- pointwise ----------------------------------------------------------------

def test_gelu_values():
    assert dc.gelu(dc.constant([0.0])).data[0] == 0.0
    assert abs(dc.gelu(dc.constant([3.0])).data[0] - 3.0) < 0.01
    assert dc.gelu(dc.constant([3.0])).data[0] == pytest.approx(2.9959503059051097, rel=1e-13)


def test_gelu_monotone_on_positive_range():
    v = dc.gelu(dc.constant(np.linspace(-0.7, 4, 200))).data
    assert np.all(np.diff(v) > 0)


def test_sigmoid_values():
    assert dc.sigmoid(dc.constant([0.0])).data[0] == 0.5
    assert dc.sigmoid(dc.constant([15.0])).data[0] == pytest.approx(0.9999996940977731, rel=1e-15)
    for x in (1.0, 5.0, 20.0):
        pos, neg = dc.sigmoid(dc.constant([x, -x])).data
        assert abs(neg - (1.0 - pos)) <= 1e-15


def test_sigmoid_extreme_inputs_finite():
    out = dc.sigmoid(dc.constant([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6))
def test_pointwise_gradients_match_fd(values):
    for op in (dc.gelu, dc.sigmoid, dc.exp):
        x = leaf(values)
        loss = lambda: dc.mean(op(x))
        loss().backward()
        assert rel_err(x.grad, fd_grad(lambda: loss().item(), x.data)) < 1e-6


def test_clamp_gradient_zero_outside():
    x = leaf([-20.0, 0.0, 9.0])
    dc.mean(dc.clamp(x, -10, 4)).backward()
    assert x.grad.tolist() == [0.0, 1 / 3, 0.0]


# --- losses -------------------------------------------------------------------

def test_cross_entropy_uniform():
    assert dc.softmax_cross_entropy(dc.constant(np.zeros(4)), 2).item() == pytest.approx(np.log(4), abs=1e-15)


def test_cross_entropy_confident():
    assert dc.softmax_cross_entropy(dc.constant([10.0, 0.0, 0.0]), 0).item() < 1e-4


def test_cross_entropy_gradient_sums_to_zero():
    z = leaf([0.3, -1.2, 2.0, 0.1])
    dc.softmax_cross_entropy(z, 1).backward()
    assert abs(z.grad.sum()) < 1e-15


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        dc.softmax_cross_entropy(dc.constant(np.zeros(3)), 3)


def test_cross_entropy_batched_gradient():
    rng = np.random.default_rng(3)
    z = leaf(rng.uniform(-2, 2, (5, 3)))
    labels = np.array([0, 2, 1, 1, 0])
    loss = lambda: dc.softmax_cross_entropy(z, labels)
    loss().backward()
    assert rel_err(z.grad, fd_grad(lambda: loss().item(), z.data)) < 1e-7


def test_gaussian_nll_empty_mask_is_zero():
    mu, lv = leaf([0.3, 0.1]), leaf([0.0, 1.0])
    assert dc.gaussian_nll(mu, lv, [1.0, 2.0], [0, 0]).item() == 0.0


def test_gaussian_nll_gradient():
    mu, lv = leaf([0.3, -0.5, 1.0]), leaf([0.2, -1.0, 0.5])
    t, m = np.array([1.0, 0.0, -1.0]), np.array([1.0, 0.0, 1.0])
    loss = lambda: dc.gaussian_nll(mu, lv, t, m)
    loss().backward()
    for x in (mu, lv):
        assert rel_err(x.grad, fd_grad(lambda: loss().item(), x.data)) < 1e-7


# --- graph properties ---------------------------------------------------------

def test_forward_deterministic_and_backward_keeps_forward():
    rng = np.random.default_rng(4)
    x, w = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(3, 2)))
    build = lambda: dc.mean(dc.gelu(dc.matmul(x, w)))
    a = build()
    before = a.data.copy()
    a.backward()
    assert np.array_equal(a.data, before)
    assert build().data.tobytes() == before.tobytes()


def test_shared_node_gradient_accumulates_once_per_path():
    x = leaf([2.0])
    y = dc.mul(x, x)  # dy/dx = 2x
    dc.mean(dc.add(y, y)).backward()
    assert x.grad.tolist() == [8.0]


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        leaf([1.0, 2.0]).backward()


# --- grad_check ---------------------------------------------------------------

def test_grad_check_linear_quadratic_exact():
    rng = np.random.default_rng(5)
    w = leaf(rng.normal(size=(3,)), "w")
    X, y = rng.normal(size=(10, 3)), rng.normal(size=10)

    def loss():
        r = dc.sub(dc.matmul(dc.constant(X), w), dc.constant(y))
        return dc.mean(dc.mul(r, r))

    assert grad_check(loss, [w], tolerance=1e-8).passed


def test_grad_check_detects_corruption():
    rng = np.random.default_rng(6)
    w = leaf(rng.normal(size=(3,)), "w")
    X = rng.normal(size=(10, 3))
    loss = lambda: dc.mean(dc.sigmoid(dc.matmul(dc.constant(X), w)))
    loss().backward()
    good = w.grad.copy()
    assert grad_check(loss, {"w": w}, tolerance=1e-5).passed
    bad = grad_check(loss, {"w": w}, tolerance=1e-5, analytic={"w": good * 1.01})
    assert not bad.passed


def test_grad_check_random_projection_path():
    rng = np.random.default_rng(7)
    w = leaf(rng.normal(size=(30, 20)), "w")
    loss = lambda: dc.mean(dc.gelu(w))
    rep = grad_check(loss, [w], tolerance=1e-6, max_elements=100)
    assert rep.passed


def test_grad_check_rejects_non_scalar():
    w = leaf([1.0, 2.0], "w")
    with pytest.raises(ContractError):
        grad_check(lambda: dc.gelu(w), [w])


def test_scalar_mul_and_outer_diff_gradients():
    row, col, c = leaf([0.0, 1.0, 4.0]), leaf([0.5, -0.2]), leaf([1.6])
    w = np.array([[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]])
    loss = lambda: dc.mean(dc.mul(dc.sigmoid(dc.scalar_mul(dc.outer_diff(row, col), c)), dc.constant(w)))
    rep = grad_check(loss, {"row": row, "col": col, "c": c}, tolerance=1e-8)
    assert rep.passed, rep.worst
