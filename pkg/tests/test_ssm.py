import numpy as np
import pytest
from hypothesis import given, strategies as st

from mambatron import numerics as nx
from mambatron import ssm
from mambatron.numerics import Tensor


def closed_form(x, p, zoh_b=False):
    """O(L^2) double sum of the unrolled recurrence, no scan involved."""
    z = x @ p.w_delta.data + p.b_delta.data
    delta = np.clip(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0), 1e-4, 10.0)
    A = -np.exp(p.a_log.data)
    B, C = x @ p.w_b.data, x @ p.w_c.data
    a_bar = np.exp(delta[:, :, None] * A)
    b_bar = (a_bar - 1) / A * B[:, None, :] if zoh_b else delta[:, :, None] * B[:, None, :]
    L = len(x)
    y = np.zeros_like(x)
    for t in range(L):
        for s in range(t + 1):
            decay = np.prod(a_bar[s + 1:t + 1], axis=0)
            y[t] += (C[t][None, :] * decay * b_bar[s] * x[s][:, None]).sum(axis=1)
    return y + p.d_skip.data * x


def test_discretize_examples():
    a_bar, b_bar = ssm.discretize(np.log(2), -1.0, 3.0)
    assert a_bar == pytest.approx(0.5) and b_bar == pytest.approx(3 * np.log(2))
    a_bar, b_bar = ssm.discretize(0.7, -1e-12, 2.0)
    assert a_bar == pytest.approx(1.0) and b_bar == pytest.approx(1.4)
    a_bar, b_bar = ssm.discretize(1e-12, -3.0, 2.0)
    assert a_bar == pytest.approx(1.0) and b_bar == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ValueError):
        ssm.discretize(0.0, -1.0, 1.0)


def test_hand_recurrence():
    a_bar = Tensor(np.full((2, 1, 1), 0.5))
    u = Tensor(np.ones((2, 1, 1)))
    y = ssm.scan_readout(a_bar, u, Tensor(np.ones((2, 1))))
    assert y.data.ravel().tolist() == [1.0, 1.5]


def test_single_step(rng):
    p = ssm.SelectiveSSMParams(3, 4, rng)
    x = rng.normal(size=(1, 3))
    y = ssm.selective_scan(Tensor(x), p).data
    delta = np.clip(np.logaddexp(0, x @ p.w_delta.data + p.b_delta.data), 1e-4, 10)
    B, C = x @ p.w_b.data, x @ p.w_c.data
    expect = (C[0] * delta[0][:, None] * B[0] * x[0][:, None]).sum(axis=1) + p.d_skip.data * x[0]
    assert np.allclose(y[0], expect, rtol=1e-13)


@pytest.mark.parametrize("zoh_b", [False, True])
@pytest.mark.parametrize("L", [1, 5, 64])
def test_matches_closed_form(rng, L, zoh_b):
    p = ssm.SelectiveSSMParams(4, 5, rng)
    x = rng.normal(size=(L, 4))
    y = ssm.selective_scan(Tensor(x), p, zoh_b=zoh_b).data
    ref = closed_form(x, p, zoh_b)
    assert np.max(np.abs(y - ref)) <= 1e-10 * np.max(np.abs(ref))


@given(st.integers(1, 96), st.integers(1, 40), st.integers(0, 10_000))
def test_chunked_equals_sequential(L, chunk, seed):
    rng = np.random.default_rng(seed)
    p = ssm.SelectiveSSMParams(3, 4, rng)
    x = Tensor(rng.normal(size=(L, 3)))
    seq = ssm.selective_scan(x, p).data
    assert np.max(np.abs(ssm.chunked_scan(x, p, chunk).data - seq)) <= 1e-12


def test_chunked_ragged_tail(rng):
    p = ssm.SelectiveSSMParams(8, 16, rng)
    x = Tensor(rng.normal(size=(67, 8)))
    seq = ssm.selective_scan(x, p).data
    for chunk in (1, 7, 8, 67):
        assert np.max(np.abs(ssm.chunked_scan(x, p, chunk).data - seq)) <= 1e-12
    with pytest.raises(ValueError):
        ssm.chunked_scan(x, p, 0)


def test_state_bounded_long_sequence(rng):
    p = ssm.SelectiveSSMParams(4, 8, rng)
    x = rng.normal(size=(4096, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = ssm.chunked_scan(Tensor(x), p, 256).data
    assert np.all(np.isfinite(y)) and np.abs(y).max() < 1e3


def test_bidirectional_single_step_shared(rng):
    layer = ssm.MambaLayer(3, 4, rng, shared=True)
    x = Tensor(rng.normal(size=(1, 3)))
    y1 = ssm.selective_scan(x, layer.fwd).data
    ctx = layer(x).data
    assert np.allclose(ctx, (2 * y1) @ layer.w_fuse.data + layer.b_fuse.data, rtol=1e-14)


def test_bidirectional_reversal_equivariance(rng):
    layer = ssm.MambaLayer(4, 4, rng, shared=True)
    x = rng.normal(size=(9, 4))
    a = layer(Tensor(x)).data[::-1]
    b = layer(Tensor(x[::-1].copy())).data
    assert np.array_equal(a, b) or np.max(np.abs(a - b)) <= 1e-14


def test_bidirectional_reaches_back(rng):
    layer = ssm.MambaLayer(4, 4, rng)
    x = rng.normal(size=(8, 4))
    eps = 1e-6
    xp, xm = x.copy(), x.copy()
    xp[-1, 0] += eps
    xm[-1, 0] -= eps
    jac = (layer(Tensor(xp)).data[0] - layer(Tensor(xm)).data[0]) / (2 * eps)
    assert np.abs(jac).max() > 1e-8


def test_batched_equals_per_sample(rng):
    p = ssm.SelectiveSSMParams(3, 4, rng)
    x = rng.normal(size=(2, 7, 3))
    batched = ssm.selective_scan(Tensor(x), p).data
    for b in range(2):
        assert np.array_equal(batched[b], ssm.selective_scan(Tensor(x[b]), p).data)


@pytest.mark.parametrize("zoh_b", [False, True])
@pytest.mark.parametrize("chunk", [None, 3])
def test_scan_gradients(rng, zoh_b, chunk):
    p = ssm.SelectiveSSMParams(3, 4, rng)
    x = Tensor(rng.normal(size=(7, 3)))
    w = rng.normal(size=(7, 3))
    fn = lambda: (ssm.selective_scan(x, p, chunk=chunk, zoh_b=zoh_b) * w).sum()  # noqa: E731
    assert nx.finite_diff_check(fn, [x] + p.parameters()) <= 1e-5


def test_a_initialisation_negative_and_geometric(rng):
    p = ssm.SelectiveSSMParams(2, 16, rng)
    a = -np.exp(p.a_log.data)
    assert np.all(a < 0)
    assert np.allclose(-a[0], np.geomspace(1, 16, 16))
