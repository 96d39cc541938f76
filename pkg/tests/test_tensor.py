"""Autodiff core: forward/backward contracts and the finite-difference oracle.

The finite-difference oracle is validated against closed forms first; the
analytic gradients of every primitive are then checked against it.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mmtl.tensor as T
from mmtl.tensor import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_gradient,
    forward_eval,
    grad_map,
    grad_or_zero,
    sgd_step,
)


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


# ---------------------------------------------------------------------------
# the oracle itself, against closed forms
# ---------------------------------------------------------------------------


def test_fd_oracle_quadratic():
    # f = x^2 at x=3 -> derivative 6
    g = finite_difference_gradient(lambda x: (x * x).sum(), Tensor([3.0]))
    assert abs(g.data[0] - 6.0) < 1e-8


def test_fd_oracle_linear_exact():
    g = finite_difference_gradient(lambda x: x.sum(), Tensor([1.0, -2.0, 0.5]))
    assert np.allclose(g.data, 1.0, atol=1e-10)


def test_fd_oracle_constant():
    g = finite_difference_gradient(lambda x: Tensor(4.0), Tensor([1.0, 2.0]))
    assert np.all(g.data == 0.0)


def test_fd_oracle_rejects_nonscalar():
    with pytest.raises(ShapeError):
        finite_difference_gradient(lambda x: x * 2.0, Tensor([1.0, 2.0]))


def test_fd_oracle_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda x: x.sum(), Tensor([1.0]), eps=0.0)


# ---------------------------------------------------------------------------
# forward_eval / backward graph contracts
# ---------------------------------------------------------------------------


def test_forward_eval_identity():
    g = Graph(lambda x: x)
    (y,) = forward_eval(g, [Tensor([2.0, 3.0])])
    assert np.array_equal(y.data, [2.0, 3.0])


def test_forward_eval_square():
    g = Graph(lambda x: x * x)
    (y,) = forward_eval(g, [Tensor([2.0, 3.0])])
    assert np.array_equal(y.data, [4.0, 9.0])


def test_forward_eval_sum():
    g = Graph(lambda x: x.sum())
    (y,) = forward_eval(g, [Tensor([1.0, 2.0, 3.0])])
    assert y.data == 6.0


def test_forward_eval_flags_nonfinite():
    g = Graph(lambda x: T.tlog(x))
    with pytest.raises(NonFiniteError):
        forward_eval(g, [Tensor([0.0])])


def test_forward_eval_shape_error_names_op_and_shapes():
    g = Graph(lambda a, b: a + b)
    with pytest.raises(ShapeError) as ei:
        forward_eval(g, [Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0])])
    msg = str(ei.value)
    assert "add" in msg and "(2,)" in msg and "(3,)" in msg


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    g = Graph(lambda t: (t * t).sum())
    (y,) = forward_eval(g, [x])
    grads = backward(g, y)
    assert np.allclose(grads[x.node_id].data, [6.0])


def test_backward_sum_all_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    g = Graph(lambda t: t.sum())
    (y,) = forward_eval(g, [x])
    grads = backward(g, y)
    assert np.array_equal(grads[x.node_id].data, np.ones(4))


def test_backward_constant_output_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    g = Graph(lambda t: Tensor(7.0) * Tensor(1.0))
    (y,) = forward_eval(g, [x])
    grads = backward(g, y)
    assert np.all(grads[x.node_id].data == 0.0)


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    g = Graph(lambda t: t * t)
    (y,) = forward_eval(g, [x])
    with pytest.raises(ShapeError):
        backward(g, y)


def test_detached_node_gets_zero_not_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    grads = grad_map(loss)
    stranger = Tensor([5.0])
    assert np.all(grad_or_zero(grads, stranger).data == 0.0)


def test_grad_accumulates_over_multiple_consumers():
    x = Tensor([2.0], requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    grads = grad_map(y.sum())
    assert np.allclose(grads[x.node_id].data, [7.0])


def test_backward_linearity():
    # backward of (l1 + l2) == backward(l1) + backward(l2)
    rng = np.random.default_rng(0)
    xd = rng.normal(size=5)
    x = Tensor(xd, requires_grad=True)
    l1 = (x * x).sum()
    l2 = (x * 3.0).sum()
    g_joint = grad_map((l1 + l2))[x.node_id].data
    x1 = Tensor(xd, requires_grad=True)
    g1 = grad_map((x1 * x1).sum())[x1.node_id].data
    x2 = Tensor(xd, requires_grad=True)
    g2 = grad_map((x2 * 3.0).sum())[x2.node_id].data
    assert np.allclose(g_joint, g1 + g2, atol=1e-15)


def test_forward_deterministic_bit_exact():
    rng = np.random.default_rng(1)
    xd = rng.normal(size=(4, 4))
    wd = rng.normal(size=(4, 3))

    def run():
        x, w = Tensor(xd), Tensor(wd)
        return T.tanh(x @ w).sum().data.copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# primitive gradients vs the oracle
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": lambda x: (x + Tensor(np.linspace(0.5, 1.5, x.size).reshape(x.shape))).sum(),
    "sub": lambda x: (Tensor(np.ones(x.shape)) - x).sum(),
    "mul": lambda x: (x * x).sum(),
    "div": lambda x: (Tensor(np.ones(x.shape)) / (x * x + 2.0)).sum(),
    "neg": lambda x: (-x).sum(),
    "pow": lambda x: ((x * x + 1.0) ** 1.5).sum(),
    "exp": lambda x: T.texp(x).sum(),
    "log": lambda x: T.tlog(x * x + 1.5).sum(),
    "sqrt": lambda x: T.tsqrt(x * x + 1.0).sum(),
    "tanh": lambda x: T.tanh(x).sum(),
    "sigmoid": lambda x: T.sigmoid(x).sum(),
    "softplus": lambda x: T.softplus(x).sum(),
    "relu": lambda x: T.relu(x + 0.05).sum(),  # nudge off the kink
    "sum_axis": lambda x: (T.tsum(x, axis=0) * Tensor(np.arange(1.0, x.shape[1] + 1))).sum(),
    "mean": lambda x: (T.tmean(x, axis=1) ** 2.0).sum(),
    "reshape": lambda x: (x.reshape((x.size,)) * Tensor(np.arange(float(x.size)))).sum(),
    "transpose": lambda x: (x.T * Tensor(np.ones((x.shape[1], x.shape[0])))).sum() ** 2.0,
    "broadcast": lambda x: (x + Tensor(np.linspace(-1, 1, x.shape[1]))).sum() ** 2.0,
    "getitem": lambda x: (x[1:, :2] * x[:-1, 1:3]).sum(),
    "pad2d": lambda x: (T.pad2d(x.reshape((1, 1) + x.shape), 1, 2) ** 2.0).sum(),
    "concat": lambda x: (T.concat([x, x * 2.0], axis=0) ** 2.0).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_fd(name):
    fn = PRIMITIVES[name]
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        xd = rng.normal(size=(3, 4))
        x = Tensor(xd, requires_grad=True)
        loss = fn(x)
        got = grad_map(loss)[x.node_id].data
        want = finite_difference_gradient(fn, Tensor(xd)).data
        assert rel_err(got, want) < 1e-5, f"{name} seed {seed}"


def test_matmul_gradients_match_fd():
    rng = np.random.default_rng(3)
    ad, bd = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def loss_a(a):
        return ((a @ Tensor(bd)) ** 2.0).sum()

    def loss_b(b):
        return ((Tensor(ad) @ b) ** 2.0).sum()

    a = Tensor(ad, requires_grad=True)
    got = grad_map(loss_a(a))[a.node_id].data
    assert rel_err(got, finite_difference_gradient(loss_a, Tensor(ad)).data) < 1e-5
    b = Tensor(bd, requires_grad=True)
    got = grad_map(loss_b(b))[b.node_id].data
    assert rel_err(got, finite_difference_gradient(loss_b, Tensor(bd)).data) < 1e-5


def test_gather_scatter_adjoint_and_grad():
    rng = np.random.default_rng(4)
    xd = rng.normal(size=(2, 6))
    idx = rng.integers(0, 12, size=20)

    def fn(x):
        return (T.gather_flat(x, idx) ** 2.0).sum()

    x = Tensor(xd, requires_grad=True)
    got = grad_map(fn(x))[x.node_id].data
    assert rel_err(got, finite_difference_gradient(fn, Tensor(xd)).data) < 1e-5
    # adjoint identity: <gather(x), y> == <x, scatter(y)>
    yd = rng.normal(size=20)
    lhs = float((T.gather_flat(Tensor(xd), idx).data * yd).sum())
    rhs = float((xd * T.scatter_flat(Tensor(yd), idx, (2, 6)).data).sum())
    assert abs(lhs - rhs) < 1e-10


def test_second_order_through_backward():
    # y = x^3: dy/dx = 3x^2, d2y/dx2 = 6x
    x = Tensor([2.0], requires_grad=True)
    y = (x * x * x).sum()
    g1 = grad_map(y, create_graph=True)[x.node_id]
    assert np.allclose(g1.data, [12.0])
    g2 = grad_map(g1.sum())[x.node_id]
    assert np.allclose(g2.data, [12.0])  # 6x at x=2


def test_second_order_mixed_expression():
    # f(x) = sum(tanh(x)^2); check grad of grad-norm against FD
    rng = np.random.default_rng(5)
    xd = rng.normal(size=4)

    def gradnorm(x):
        y = (T.tanh(x) ** 2.0).sum()
        g = grad_map(y, create_graph=True)[x.node_id]
        return (g * g).sum()

    x = Tensor(xd, requires_grad=True)
    got = grad_map(gradnorm(x))[x.node_id].data
    want = finite_difference_gradient(
        lambda t: gradnorm(_rg(t)), Tensor(xd), eps=1e-6).data
    assert rel_err(got, want) < 1e-5


def _rg(t):
    return Tensor(t.data, requires_grad=True)


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def test_sgd_step_values():
    p = sgd_step(Tensor([1.0]), Tensor([1.0]), 0.1)
    assert np.allclose(p.data, [0.9])


def test_sgd_step_zero_lr():
    p = Tensor([1.5, -2.0])
    assert np.array_equal(sgd_step(p, Tensor([3.0, 4.0]), 0.0).data, p.data)


def test_sgd_step_zero_grad():
    p = Tensor([1.5, -2.0])
    assert np.array_equal(sgd_step(p, Tensor([0.0, 0.0]), 0.3).data, p.data)


def test_sgd_step_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step(Tensor([1.0, 2.0]), Tensor([1.0]), 0.1)


def test_optimizer_zero_lr_is_identity():
    opt = T.Optimizer("adam", lr=0.0)
    params = {"w": Tensor([1.0, 2.0], requires_grad=True)}
    out = opt.step(params, {"w": np.array([5.0, 5.0])})
    assert out["w"] is params["w"]


def test_optimizer_adam_moves_against_gradient():
    opt = T.Optimizer("adam", lr=0.1)
    params = {"w": Tensor([1.0], requires_grad=True)}
    out = opt.step(params, {"w": np.array([2.0])})
    assert out["w"].data[0] < 1.0


# ---------------------------------------------------------------------------
# property tests
# ---------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.integers(0, 2 ** 31 - 1))
def test_fd_matches_analytic_on_random_polynomials(xs, seed):
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=3)

    def fn(x):
        return (x * x * coef[0] + x * coef[1] + coef[2]).sum()

    xd = np.asarray(xs)
    x = Tensor(xd, requires_grad=True)
    got = grad_map(fn(x))[x.node_id].data
    want = finite_difference_gradient(fn, Tensor(xd)).data
    assert rel_err(got, want) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_backward_of_sum_of_losses_is_sum_of_backwards(seed):
    rng = np.random.default_rng(seed)
    xd = rng.normal(size=6)
    x = Tensor(xd, requires_grad=True)
    la = (T.tanh(x) * 2.0).sum()
    lb = (x * x).sum()
    joint = grad_map(la + lb)[x.node_id].data
    sep = grad_map(la)[x.node_id].data + grad_map(lb)[x.node_id].data
    assert np.allclose(joint, sep, atol=1e-14)
