import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mambatron import numerics as nx
from mambatron.numerics import Tensor

finite = st.floats(-10, 10, allow_nan=False)


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def test_linear_examples():
    eye = np.eye(2)
    assert np.array_equal(nx.linear(T(eye), T(eye), T([0, 0])).data, eye)
    out = nx.linear(T(np.zeros((3, 2))), T([[1.0, 2.0], [3.0, 4.0]]), T([5.0, -1.0])).data
    assert np.array_equal(out, np.tile([5.0, -1.0], (3, 1)))
    assert nx.linear(T([[1, 2]]), T([[1], [1]]), T([0])).data.tolist() == [[3.0]]


def test_linear_dimension_error_names_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.linear(T(np.ones((2, 3))), T(np.ones((4, 5))))


def test_softmax_examples():
    assert np.allclose(nx.softmax(T([[0.0, 0.0]])).data, [[0.5, 0.5]])
    assert np.allclose(nx.softmax(T([[0.0, np.log(3)]])).data, [[0.25, 0.75]], atol=1e-15)
    out = nx.softmax(T([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out)) and out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300


def test_softmax_mask_gives_exact_zeros():
    out = nx.softmax(T([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


@given(arrays(float, (4, 7), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = nx.softmax(T(x)).data.sum(axis=1)
    assert np.all(np.abs(s - 1) <= 1e-12)


def test_layer_norm_examples():
    z = nx.layer_norm(T([[3.0, 3.0, 3.0]]), T(np.ones(3)), T(np.zeros(3))).data
    assert np.allclose(z, 0)
    y = nx.layer_norm(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2)), eps=1e-12).data
    assert np.allclose(y, [[1, -1]], atol=1e-10)
    b = nx.layer_norm(T(np.random.default_rng(0).normal(size=(2, 4))), T(np.zeros(4)), T([1.0, 2, 3, 4])).data
    assert np.array_equal(b, np.tile([1.0, 2, 3, 4], (2, 1)))


@given(arrays(float, (3, 6), elements=finite))
def test_layer_norm_zero_mean_rows(x):
    y = nx.layer_norm(T(x), T(np.full(6, 1.7)), T(np.zeros(6))).data
    assert np.all(np.abs(y.mean(axis=1)) <= 1e-10)


def test_backward_examples():
    x = T(3.0)
    nx.backward(x * x)
    assert x.grad == 6.0
    y = T(2.0)
    nx.backward(y * 0.0 + 5.0)
    assert y.grad == 0.0


def test_backward_requires_scalar():
    with pytest.raises(nx.ContractError):
        nx.backward(T([1.0, 2.0]) * 2.0)


def test_backward_visits_shared_node_once():
    x = T(2.0)
    h = x * x
    loss = h + h * 3.0  # 4 x^2
    nx.backward(loss)
    assert x.grad == 16.0


def test_three_layer_composition_matches_finite_differences(rng):
    x = T(rng.normal(size=(5, 4)))
    ws = [T(rng.normal(size=(4, 4))) for _ in range(3)]
    bs = [T(rng.normal(size=4)) for _ in range(3)]

    def f():
        h = x
        for w, b in zip(ws, bs):
            h = nx.tanh(nx.linear(h, w, b))
        return (h * h).sum()
    assert nx.finite_diff_check(f, [x] + ws + bs) <= 1e-6


def test_finite_diff_quadratic_form(rng):
    A = rng.normal(size=(4, 4))
    x = T(rng.normal(size=(4, 1)))
    assert nx.finite_diff_check(lambda: (x * nx.matmul(T(A, False), x)).sum(), [x]) <= 1e-8


def _doubled_square(x):
    def bw(g):
        return (4.0 * x.data * g,)  # true derivative is 2x
    return nx.record(x.data ** 2, (x,), bw)


def test_finite_diff_detects_corrupted_gradient():
    # relative error is |a - n| / max(1, |a|); doubling a gradient gives 0.5 at large |a|
    x = T([3.0, -2.0, 5.0])
    err = nx.finite_diff_check(lambda: _doubled_square(x).sum(), [x])
    assert err >= 0.5 - 1e-6
    assert nx.directional_diff_check(lambda: _doubled_square(x).sum(), [x]) > 0.1


def test_finite_diff_rejects_nondeterministic_fn(rng):
    x = T([1.0])
    with pytest.raises(nx.ContractError):
        nx.finite_diff_check(lambda: x * float(rng.normal()), [x])


OPS = {
    "exp": lambda a: nx.exp(a * 0.3),
    "log": lambda a: nx.log(a * a + 1.0),
    "sqrt": lambda a: nx.sqrt(a * a + 0.5),
    "tanh": nx.tanh,
    "sigmoid": nx.sigmoid,
    "softplus": nx.softplus,
    "silu": nx.silu,
    "div": lambda a: a / (a * a + 2.0),
    "power": lambda a: a ** 3,
    "softmax": lambda a: nx.softmax(a, axis=-1),
    "softmax_masked": lambda a: nx.softmax(a, axis=-1, mask=np.array([True, False, True, True])),
    "layer_norm": lambda a: nx.layer_norm(a, Tensor(np.linspace(0.5, 2, 4)), Tensor(np.ones(4))),
    "amax": lambda a: nx.amax(a, axis=0),
    "mean": lambda a: nx.mean(a, axis=1, keepdims=True) * a,
    "transpose": lambda a: nx.matmul(a, nx.transpose(a)),
    "fancy_index": lambda a: a[np.array([0, 2, 0]), 1:],
    "flip": lambda a: nx.flip(a, 0) * a,
    "stack": lambda a: nx.stack([a, a * a], axis=1),
    "where": lambda a: nx.where(a.data > 0, a * 2.0, a * a),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    x = T(rng.uniform(-2, 2, size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))

    def f():
        y = OPS[name](x)
        return (y * Tensor(np.resize(w.data, y.shape))).sum()
    assert nx.finite_diff_check(f, [x]) <= 1e-6


def test_clip_gradient_zero_outside_range():
    x = T([-2.0, 0.5, 2.0])
    nx.backward(nx.clip(x, -1.0, 1.0).sum())
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_broadcast_gradients_reduce_to_shape(rng):
    a, b = T(rng.normal(size=(3, 1, 4))), T(rng.normal(size=(5, 1)))
    assert nx.finite_diff_check(lambda: ((a * b + b) ** 2).sum(), [a, b]) <= 1e-6
    nx.backward((a * b).sum())
    assert a.grad.shape == (3, 1, 4) and b.grad.shape == (5, 1)


def test_forward_bitwise_deterministic(rng):
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(5, 5))
    f = lambda: nx.softmax(nx.linear(T(x), T(w))).data  # noqa: E731
    assert f().tobytes() == f().tobytes()


def test_mac_counter_matmul():
    with nx.count_macs() as c:
        nx.matmul(T(np.ones((3, 4))), T(np.ones((4, 5))))
    assert c.total == 60


def test_no_grad_records_nothing():
    x = T([1.0, 2.0])
    with nx.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_init_uniform_bounds(rng):
    w = nx.init_uniform(rng, (64, 64), 64)
    assert np.abs(w.data).max() <= 1 / 8
